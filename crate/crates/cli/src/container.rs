//! Tensor container files and their text sidecars.
//!
//! ```text
//! UDIF1\n
//! <N> <audio CxTxFx1> <video CxTxHxW> <K> <layout digest>\n
//! N records: audio tokens, video tokens (f32 LE, channels innermost), class id (u32 LE)
//! ```
//!
//! A class id of `u32::MAX` marks an unlabelled record.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array4;
use unidiff_core::latent::{parse_shape, shape_str};
use unidiff_core::train::Record;
use unidiff_core::{Error, ModalityLayout, Result};

pub const MAGIC: &str = "UDIF1";
pub const NULL_CLASS: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub layout: ModalityLayout,
    pub num_classes: usize,
    pub records: Vec<Record>,
}

fn put_audio(out: &mut Vec<u8>, a: &Array4<f64>) -> Result<()> {
    let [c, t, f, _] = *<&[usize; 4]>::try_from(a.shape()).expect("rank 4");
    for ti in 0..t {
        for fi in 0..f {
            for ci in 0..c {
                put(out, a[[ci, ti, fi, 0]])?;
            }
        }
    }
    Ok(())
}

fn put_video(out: &mut Vec<u8>, v: &Array4<f64>) -> Result<()> {
    let [c, t, h, w] = *<&[usize; 4]>::try_from(v.shape()).expect("rank 4");
    for ti in 0..t {
        for y in 0..h {
            for x in 0..w {
                for ci in 0..c {
                    put(out, v[[ci, ti, y, x]])?;
                }
            }
        }
    }
    Ok(())
}

fn put(out: &mut Vec<u8>, x: f64) -> Result<()> {
    let y = x as f32;
    if !y.is_finite() {
        return Err(Error::NonFinite(format!("cannot store {x} as a 32-bit real")));
    }
    out.extend_from_slice(&y.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn f32(&mut self) -> f64 {
        let b = &self.bytes[self.pos..self.pos + 4];
        self.pos += 4;
        f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64
    }

    fn u32(&mut self) -> u32 {
        let b = &self.bytes[self.pos..self.pos + 4];
        self.pos += 4;
        u32::from_le_bytes(b.try_into().expect("4 bytes"))
    }

    fn audio(&mut self, shape: [usize; 4]) -> Array4<f64> {
        let [c, t, f, _] = shape;
        let mut a = Array4::zeros(shape);
        for ti in 0..t {
            for fi in 0..f {
                for ci in 0..c {
                    a[[ci, ti, fi, 0]] = self.f32();
                }
            }
        }
        a
    }

    fn video(&mut self, shape: [usize; 4]) -> Array4<f64> {
        let [c, t, h, w] = shape;
        let mut v = Array4::zeros(shape);
        for ti in 0..t {
            for y in 0..h {
                for x in 0..w {
                    for ci in 0..c {
                        v[[ci, ti, y, x]] = self.f32();
                    }
                }
            }
        }
        v
    }
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

impl Container {
    pub fn new(layout: ModalityLayout, num_classes: usize, records: Vec<Record>) -> Result<Self> {
        for (i, r) in records.iter().enumerate() {
            if r.audio.shape() != layout.audio_shape() {
                return Err(Error::ShapeMismatch {
                    expected: layout.audio_shape().to_vec(),
                    got: r.audio.shape().to_vec(),
                });
            }
            if r.video.shape() != layout.video_shape() {
                return Err(Error::ShapeMismatch {
                    expected: layout.video_shape().to_vec(),
                    got: r.video.shape().to_vec(),
                });
            }
            if let Some(k) = r.class {
                if k >= num_classes {
                    return Err(Error::Format(format!("record {i} has class {k} but K = {num_classes}")));
                }
            }
        }
        Ok(Self { layout, num_classes, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn record_bytes(&self) -> usize {
        4 * (self.layout.audio_flat_dim() + self.layout.video_flat_dim() + 1)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = format!(
            "{MAGIC}\n{} {} {} {} {}\n",
            self.records.len(),
            shape_str(&self.layout.audio_shape()),
            shape_str(&self.layout.video_shape()),
            self.num_classes,
            self.layout.digest()
        );
        let mut out = Vec::with_capacity(header.len() + self.records.len() * self.record_bytes());
        out.extend_from_slice(header.as_bytes());
        for r in &self.records {
            put_audio(&mut out, &r.audio)?;
            put_video(&mut out, &r.video)?;
            let id = match r.class {
                Some(k) => k as u32,
                None => NULL_CLASS,
            };
            out.extend_from_slice(&id.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut lines = bytes.splitn(3, |&b| b == b'\n');
        let magic = lines.next().unwrap_or_default();
        if magic != MAGIC.as_bytes() {
            return Err(format_err("not a tensor container (bad magic)"));
        }
        let header = lines.next().ok_or_else(|| format_err("container header is missing"))?;
        let payload = lines.next().ok_or_else(|| format_err("container header is not terminated"))?;
        let header = std::str::from_utf8(header).map_err(|_| format_err("container header is not text"))?;
        let fields: Vec<&str> = header.split(' ').collect();
        let [n, audio, video, k, digest] = fields[..] else {
            return Err(format_err(format!("container header needs 5 fields, found {}", fields.len())));
        };
        let n: usize = n.parse().map_err(|_| format_err(format!("bad record count '{n}'")))?;
        let num_classes: usize = k.parse().map_err(|_| format_err(format!("bad class count '{k}'")))?;
        let layout = ModalityLayout::new(parse_shape(audio)?, parse_shape(video)?)
            .map_err(|e| format_err(format!("bad container layout: {e}")))?;
        if layout.digest() != digest {
            return Err(Error::DigestMismatch { stored: digest.to_string(), computed: layout.digest() });
        }
        let mut c = Self { layout, num_classes, records: Vec::new() };
        let want = n.checked_mul(c.record_bytes()).ok_or_else(|| format_err("record count overflows"))?;
        if payload.len() != want {
            return Err(format_err(format!(
                "container holds {} payload bytes, header promises {want}",
                payload.len()
            )));
        }
        let mut r = Reader { bytes: payload, pos: 0 };
        c.records.reserve(n);
        for i in 0..n {
            let audio = r.audio(layout.audio_shape());
            let video = r.video(layout.video_shape());
            let class = match r.u32() {
                NULL_CLASS => None,
                id if (id as usize) < num_classes => Some(id as usize),
                id => return Err(format_err(format!("record {i} has class {id} but K = {num_classes}"))),
            };
            c.records.push(Record { audio, video, class });
        }
        Ok(c)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn pairs(&self) -> Vec<(Array4<f64>, Array4<f64>)> {
        self.records.iter().map(|r| (r.audio.clone(), r.video.clone())).collect()
    }
}

/// `<path>.<suffix>`, keeping the original extension.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

/// Run metadata written next to every artifact as sorted `key = value` lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Meta(pub BTreeMap<String, String>);

impl Meta {
    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.0.insert(key.to_string(), value.to_string());
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str, path: &Path) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| format_err(format!("{} has no '{key}' entry", path.display())))
    }

    pub fn render(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Self::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| format_err(format!("bad metadata line '{line}'")))?;
            m.set(k, v);
        }
        Ok(m)
    }

    /// Writes the sidecar of `artifact`.
    pub fn write_for(&self, artifact: &Path) -> Result<()> {
        std::fs::write(sidecar(artifact, "meta"), self.render())?;
        Ok(())
    }

    pub fn read_for(artifact: &Path) -> Result<Self> {
        let path = sidecar(artifact, "meta");
        let text = std::fs::read_to_string(&path)
            .map_err(|e| format_err(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }
}
