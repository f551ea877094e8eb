//! Dense row-major `f64` tensors and the `CCT1` binary format.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Dense N-dimensional array.
///
/// `grad` is only populated on parameter tensors, where it accumulates
/// gradients harvested from backward passes between optimizer steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::invalid("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        if numel(&shape) != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} needs {} values, got {}", numel(&shape), data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::full(&[1], value)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel(shape)).map(&mut f).collect(),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn identity(n: usize) -> Self {
        Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let w = *self.shape.last().unwrap();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    /// Bitwise equality of shape and data (distinguishes -0.0 and NaN payloads).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn write_cct1<W: Write>(&self, w: W) -> std::io::Result<()> {
        write_payload(w, *CCT1, &self.shape, &self.data)
    }

    pub fn write_cct8<W: Write>(&self, w: W) -> std::io::Result<()> {
        write_payload(w, *CCT8, &self.shape, &self.data)
    }

    /// Reads either the `f32` (`CCT1`) or `f64` (`CCT8`) variant.
    pub fn read_cct<R: Read>(mut r: R) -> Result<Self> {
        let bad = |msg: &str| Error::invalid("cct", msg.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        let wide = match &magic {
            CCT1 => false,
            CCT8 => true,
            _ => return Err(bad("bad magic")),
        };
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank).map_err(|_| bad("truncated header"))?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| bad("truncated dims"))?;
            shape.push(u32::from_le_bytes(b) as usize);
        }
        let n = numel(&shape);
        let mut data = Vec::with_capacity(n);
        if wide {
            let mut b = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut b).map_err(|_| bad("truncated payload"))?;
                data.push(f64::from_le_bytes(b));
            }
        } else {
            let mut b = [0u8; 4];
            for _ in 0..n {
                r.read_exact(&mut b).map_err(|_| bad("truncated payload"))?;
                data.push(f32::from_le_bytes(b) as f64);
            }
        }
        let mut tail = [0u8; 1];
        if r.read(&mut tail).map_err(|_| bad("read error"))? != 0 {
            return Err(bad("trailing bytes after payload"));
        }
        Tensor::new(shape, data)
    }

    pub fn save_cct1(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_cct1(&mut buf).expect("in-memory write");
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn save_cct8(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_cct8(&mut buf).expect("in-memory write");
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Tensor::read_cct(bytes.as_slice())
    }
}

const CCT1: &[u8; 4] = b"CCT1";
const CCT8: &[u8; 4] = b"CCT8";

fn write_payload<W: Write>(mut w: W, magic: [u8; 4], shape: &[usize], data: &[f64]) -> std::io::Result<()> {
    w.write_all(&magic)?;
    w.write_all(&[shape.len() as u8])?;
    for &d in shape {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    if &magic == CCT8 {
        for v in data {
            w.write_all(&v.to_le_bytes())?;
        }
    } else {
        for v in data {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}
