//! Single-file binary checkpoints of learner state.
//!
//! Layout (little-endian): magic `RAEC`, version u16, update counter u64,
//! named scalars, named networks (architecture plus f32 parameters), named
//! optimizers (config, step count, f64 moments) and an optional RNG position.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use super::{Activation, Adam, AdamConfig, Dense, GaussianHead, Head, Mlp, Squash};
use crate::error::{Error, Result};
use crate::rng::RngState;

const MAGIC: &[u8; 4] = b"RAEC";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub update_counter: u64,
    pub scalars: Vec<(String, f64)>,
    pub nets: Vec<(String, Mlp)>,
    pub optimizers: Vec<(String, Adam)>,
    pub rng: Option<RngState>,
}

impl Checkpoint {
    pub fn net(&self, name: &str) -> Option<&Mlp> {
        self.nets.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn optimizer(&self, name: &str) -> Option<&Adam> {
        self.optimizers.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn scalar(&self, name: &str) -> Option<f64> {
        self.scalars.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u16(VERSION);
        w.u64(self.update_counter);
        w.u32(self.scalars.len() as u32);
        for (name, v) in &self.scalars {
            w.str(name);
            w.f64(*v);
        }
        w.u32(self.nets.len() as u32);
        for (name, net) in &self.nets {
            w.str(name);
            write_net(&mut w, net);
        }
        w.u32(self.optimizers.len() as u32);
        for (name, opt) in &self.optimizers {
            w.str(name);
            write_adam(&mut w, opt);
        }
        match &self.rng {
            None => w.u8(0),
            Some(state) => {
                w.u8(1);
                w.0.extend_from_slice(&state.seed);
                w.u64(state.stream);
                w.0.extend_from_slice(&state.word_pos.to_le_bytes());
            }
        }
        w.0
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(r.corrupt("bad magic"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(r.corrupt(&format!("unsupported version {version}")));
        }
        let update_counter = r.u64()?;
        let mut scalars = Vec::new();
        for _ in 0..r.u32()? {
            scalars.push((r.str()?, r.f64()?));
        }
        let mut nets = Vec::new();
        for _ in 0..r.u32()? {
            let name = r.str()?;
            nets.push((name, read_net(&mut r)?));
        }
        let mut optimizers = Vec::new();
        for _ in 0..r.u32()? {
            let name = r.str()?;
            optimizers.push((name, read_adam(&mut r)?));
        }
        let rng = match r.u8()? {
            0 => None,
            1 => {
                let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
                let stream = r.u64()?;
                let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
                Some(RngState { seed, stream, word_pos })
            }
            t => return Err(r.corrupt(&format!("bad rng tag {t}"))),
        };
        if r.pos != bytes.len() {
            return Err(r.corrupt("trailing bytes"));
        }
        Ok(Self {
            update_counter,
            scalars,
            nets,
            optimizers,
            rng,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.encode()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Missing(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        Self::decode(&bytes, path)
    }
}

fn write_net(w: &mut Writer, net: &Mlp) {
    w.u8(net.activation().code());
    match net.head() {
        Head::Linear => w.u8(0),
        Head::DiagonalGaussian(g) => {
            w.u8(1);
            w.u32(g.act_dim as u32);
            w.f64(g.min_scale);
            match &g.squash {
                None => w.u8(0),
                Some(sq) => {
                    w.u8(1);
                    for v in sq.low.iter().chain(&sq.high) {
                        w.f64(*v);
                    }
                }
            }
        }
        Head::Categorical { atoms } => {
            w.u8(2);
            w.u32(*atoms as u32);
        }
    }
    w.u32(net.sizes().len() as u32);
    for s in net.sizes() {
        w.u32(*s as u32);
    }
    for v in net.flat_params() {
        w.0.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn read_net(r: &mut Reader) -> Result<Mlp> {
    let act = r.u8()?;
    let activation = Activation::from_code(act).ok_or_else(|| r.corrupt(&format!("bad activation {act}")))?;
    let head = match r.u8()? {
        0 => Head::Linear,
        1 => {
            let act_dim = r.u32()? as usize;
            let min_scale = r.f64()?;
            let squash = match r.u8()? {
                0 => None,
                _ => {
                    let low = (0..act_dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                    let high = (0..act_dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                    Some(Squash::new(low, high))
                }
            };
            Head::DiagonalGaussian(GaussianHead {
                act_dim,
                min_scale,
                squash,
            })
        }
        2 => Head::Categorical {
            atoms: r.u32()? as usize,
        },
        t => return Err(r.corrupt(&format!("bad head tag {t}"))),
    };
    let n = r.u32()? as usize;
    if n < 2 {
        return Err(r.corrupt("network needs at least two sizes"));
    }
    let sizes = (0..n).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let mut layers = Vec::with_capacity(n - 1);
    for pair in sizes.windows(2) {
        let (i, o) = (pair[0], pair[1]);
        let w = r.f32s(i * o)?;
        let b = r.f32s(o)?;
        layers.push(Dense {
            w: Array2::from_shape_vec((i, o), w).expect("length matches"),
            b: Array1::from(b),
        });
    }
    Mlp::from_layers(layers, activation, head)
}

fn write_adam(w: &mut Writer, opt: &Adam) {
    let c = &opt.config;
    for v in [c.learning_rate, c.beta1, c.beta2, c.epsilon] {
        w.f64(v);
    }
    match c.max_grad_norm {
        None => w.u8(0),
        Some(v) => {
            w.u8(1);
            w.f64(v);
        }
    }
    w.u64(opt.step_count);
    w.u32(opt.first.len() as u32);
    for moments in [&opt.first, &opt.second] {
        for d in moments {
            w.u32(d.w.nrows() as u32);
            w.u32(d.w.ncols() as u32);
            for v in d.w.iter().chain(d.b.iter()) {
                w.f64(*v);
            }
        }
    }
}

fn read_adam(r: &mut Reader) -> Result<Adam> {
    let learning_rate = r.f64()?;
    let beta1 = r.f64()?;
    let beta2 = r.f64()?;
    let epsilon = r.f64()?;
    let max_grad_norm = match r.u8()? {
        0 => None,
        _ => Some(r.f64()?),
    };
    let step_count = r.u64()?;
    let layers = r.u32()? as usize;
    let read_moments = |r: &mut Reader| -> Result<Vec<Dense>> {
        (0..layers)
            .map(|_| {
                let rows = r.u32()? as usize;
                let cols = r.u32()? as usize;
                let w = (0..rows * cols).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                let b = (0..cols).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                Ok(Dense {
                    w: Array2::from_shape_vec((rows, cols), w).expect("length matches"),
                    b: Array1::from(b),
                })
            })
            .collect()
    };
    let first = read_moments(r)?;
    let second = read_moments(r)?;
    Ok(Adam {
        config: AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            max_grad_norm,
        },
        step_count,
        first,
        second,
    })
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, reason: &str) -> Error {
        Error::Corrupt {
            path: self.path.to_path_buf(),
            reason: format!("{reason} (offset {})", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(self.corrupt("unexpected end of checkpoint")),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| self.corrupt("size overflow"))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.corrupt("name is not UTF-8"))
    }
}
