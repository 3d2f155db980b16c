//! Binary checkpoint container.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic      8 bytes   "CBLCKPT\0"
//! version    u32       1
//! iteration  u64
//! dims       4 × u64   num_classes, feature_dim, hidden_dim, num_oic
//! count      u32       number of tensors
//! tensors    count × { name_len u32, name utf-8, rows u64, cols u64, rows·cols × f64 }
//! ```
//!
//! Tensor names are prefixed `student.`, `teacher.` or `velocity.`; biases
//! are stored as `len × 1`. The teacher block is absent for runs without a
//! teacher.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelDims, StudentParams};
use crate::numcore::{AffineParams, Mat};
use crate::wet::WetParams;

pub const MAGIC: &[u8; 8] = b"CBLCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub student: StudentParams,
    pub teacher: Option<WetParams>,
    /// SGD momentum buffer, laid out like the student.
    pub velocity: StudentParams,
}

struct Tensor {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

fn student_layers(p: &StudentParams) -> Vec<(String, &AffineParams)> {
    let mut out = vec![
        ("adapter".to_string(), &p.adapter),
        ("midn.cls".to_string(), &p.midn.cls),
        ("midn.det".to_string(), &p.midn.det),
    ];
    for (k, h) in p.oic.iter().enumerate() {
        out.push((format!("oic{}", k + 1), h));
    }
    out.push(("rcnn.cls".to_string(), &p.rcnn_cls));
    out.push(("rcnn.reg".to_string(), &p.rcnn_reg));
    out
}

fn student_layers_mut(p: &mut StudentParams) -> Vec<(String, &mut AffineParams)> {
    let mut out = vec![
        ("adapter".to_string(), &mut p.adapter),
        ("midn.cls".to_string(), &mut p.midn.cls),
        ("midn.det".to_string(), &mut p.midn.det),
    ];
    for (k, h) in p.oic.iter_mut().enumerate() {
        out.push((format!("oic{}", k + 1), h));
    }
    out.push(("rcnn.cls".to_string(), &mut p.rcnn_cls));
    out.push(("rcnn.reg".to_string(), &mut p.rcnn_reg));
    out
}

fn push_layer(out: &mut Vec<Tensor>, prefix: &str, name: &str, layer: &AffineParams) {
    out.push(Tensor {
        name: format!("{prefix}.{name}.weight"),
        rows: layer.weight.rows(),
        cols: layer.weight.cols(),
        data: layer.weight.data().to_vec(),
    });
    out.push(Tensor {
        name: format!("{prefix}.{name}.bias"),
        rows: layer.bias.len(),
        cols: 1,
        data: layer.bias.clone(),
    });
}

fn fill_layer(
    tensors: &mut std::slice::Iter<'_, Tensor>,
    prefix: &str,
    name: &str,
    layer: &mut AffineParams,
) -> Result<()> {
    let mut next = |suffix: &str, rows: usize, cols: usize| -> Result<Vec<f64>> {
        let want = format!("{prefix}.{name}.{suffix}");
        let t = tensors
            .next()
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {want}")))?;
        if t.name != want {
            return Err(Error::Checkpoint(format!(
                "expected tensor {want}, found {}",
                t.name
            )));
        }
        if (t.rows, t.cols) != (rows, cols) {
            return Err(Error::Checkpoint(format!(
                "tensor {want}: expected {rows}x{cols}, found {}x{}",
                t.rows, t.cols
            )));
        }
        Ok(t.data.clone())
    };
    let (r, c) = layer.weight.shape();
    layer.weight = Mat::from_vec(r, c, next("weight", r, c)?)
        .map_err(|e| Error::Checkpoint(format!("{prefix}.{name}.weight: {e}")))?;
    layer.bias = next("bias", r, 1)?;
    if !layer.bias.iter().all(|v| v.is_finite()) {
        return Err(Error::Checkpoint(format!(
            "{prefix}.{name}.bias has non-finite values"
        )));
    }
    Ok(())
}

impl Checkpoint {
    pub fn dims(&self) -> ModelDims {
        self.student.dims()
    }

    fn tensors(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for (name, layer) in student_layers(&self.student) {
            push_layer(&mut out, "student", &name, layer);
        }
        if let Some(t) = &self.teacher {
            push_layer(&mut out, "teacher", "adapter", &t.adapter);
            push_layer(&mut out, "teacher", "head", &t.head);
        }
        for (name, layer) in student_layers(&self.velocity) {
            push_layer(&mut out, "velocity", &name, layer);
        }
        out
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let d = self.dims();
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.iteration.to_le_bytes())?;
        for v in [d.num_classes, d.feature_dim, d.hidden_dim, d.num_oic] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        let tensors = self.tensors();
        w.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for t in &tensors {
            w.write_all(&(t.name.len() as u32).to_le_bytes())?;
            w.write_all(t.name.as_bytes())?;
            w.write_all(&(t.rows as u64).to_le_bytes())?;
            w.write_all(&(t.cols as u64).to_le_bytes())?;
            for v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)
            .expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let iteration = r.u64()?;
        let dims = ModelDims {
            num_classes: r.usize()?,
            feature_dim: r.usize()?,
            hidden_dim: r.usize()?,
            num_oic: r.usize()?,
        };
        dims.validate()
            .map_err(|e| Error::Checkpoint(format!("invalid dimensions: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?
                .to_string();
            let rows = r.usize()?;
            let cols = r.usize()?;
            let n = rows
                .checked_mul(cols)
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name} is truncated")))?;
            let data = r
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            tensors.push(Tensor {
                name,
                rows,
                cols,
                data,
            });
        }
        if r.remaining() != 0 {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                r.remaining()
            )));
        }

        let has_teacher = tensors.iter().any(|t| t.name.starts_with("teacher."));
        let mut it = tensors.iter();
        let mut student = StudentParams::zeros(&dims);
        for (name, layer) in student_layers_mut(&mut student) {
            fill_layer(&mut it, "student", &name, layer)?;
        }
        let teacher = if has_teacher {
            let (h, d, c) = (dims.hidden_dim, dims.feature_dim, dims.num_classes);
            let mut t = WetParams {
                adapter: AffineParams::zeros(h, d),
                head: AffineParams::zeros(c + 1, h),
            };
            fill_layer(&mut it, "teacher", "adapter", &mut t.adapter)?;
            fill_layer(&mut it, "teacher", "head", &mut t.head)?;
            Some(t)
        } else {
            None
        };
        let mut velocity = StudentParams::zeros(&dims);
        for (name, layer) in student_layers_mut(&mut velocity) {
            fill_layer(&mut it, "velocity", &name, layer)?;
        }
        if let Some(extra) = it.next() {
            return Err(Error::Checkpoint(format!(
                "unexpected tensor {}",
                extra.name
            )));
        }
        Ok(Self {
            iteration,
            student,
            teacher,
            velocity,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        match std::fs::File::open(path) {
            Ok(mut f) => f.read_to_end(&mut bytes)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::Checkpoint(format!(
                    "checkpoint file not found: {}",
                    path.display()
                )))
            }
            Err(e) => return Err(e.into()),
        };
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("size overflows usize".into()))
    }
}
