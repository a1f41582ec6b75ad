//! Labelled samples with provenance (generation tag, real/synthetic flag) and
//! the little-endian `LSFD` container used to move them between commands.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};

use crate::diffusion::{FrozenEncoder, GaussianComponent, GaussianScoreModel, NoiseSchedule};
use crate::error::{invalid, Error, Result};
use crate::numerics;
use crate::probe::ProbeClassifier;

#[derive(Debug, Clone, PartialEq)]
pub struct ProvenancedDataset {
    /// d×n, one sample per column.
    pub features: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub generations: Vec<u32>,
    pub real: Vec<bool>,
}

impl ProvenancedDataset {
    pub fn new(features: DMatrix<f64>, labels: Vec<usize>, generations: Vec<u32>, real: Vec<bool>) -> Result<Self> {
        let n = features.ncols();
        numerics::check_dims("label count", labels.len(), n)?;
        numerics::check_dims("generation tag count", generations.len(), n)?;
        numerics::check_dims("real flag count", real.len(), n)?;
        numerics::ensure_finite(&features, "features")?;
        Ok(Self { features, labels, generations, real })
    }

    pub fn empty(d: usize) -> Self {
        Self { features: DMatrix::zeros(d, 0), labels: vec![], generations: vec![], real: vec![] }
    }

    /// All samples tagged with one generation and one provenance flag.
    pub fn tagged(features: DMatrix<f64>, labels: Vec<usize>, generation: u32, real: bool) -> Result<Self> {
        let n = features.ncols();
        Self::new(features, labels, vec![generation; n], vec![real; n])
    }

    pub fn len(&self) -> usize {
        self.features.ncols()
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn dim(&self) -> usize {
        self.features.nrows()
    }
    pub fn sample(&self, i: usize) -> DVector<f64> {
        self.features.column(i).into_owned()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            features: self.features.select_columns(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            generations: idx.iter().map(|&i| self.generations[i]).collect(),
            real: idx.iter().map(|&i| self.real[i]).collect(),
        }
    }

    pub fn concat(parts: &[&Self]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return invalid("concat of no datasets");
        };
        let d = first.dim();
        let n: usize = parts.iter().map(|p| p.len()).sum();
        let mut features = DMatrix::zeros(d, n);
        let (mut labels, mut generations, mut real) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        let mut at = 0;
        for p in parts {
            numerics::check_dims("dataset dimension", p.dim(), d)?;
            features.columns_mut(at, p.len()).copy_from(&p.features);
            at += p.len();
            labels.extend_from_slice(&p.labels);
            generations.extend_from_slice(&p.generations);
            real.extend_from_slice(&p.real);
        }
        Ok(Self { features, labels, generations, real })
    }

    pub fn class_count(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m + 1)
    }
}

/// Mean generation tag and fraction of real samples.
pub fn provenance_stats(data: &ProvenancedDataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return invalid("provenance stats of an empty dataset");
    }
    let n = data.len() as f64;
    let mean_gen = data.generations.iter().map(|&g| g as f64).sum::<f64>() / n;
    let real = data.real.iter().filter(|&&r| r).count() as f64 / n;
    Ok((mean_gen, real))
}

pub const MAGIC: &[u8; 4] = b"LSFD";
pub const VERSION: u32 = 1;
const TAG_MODEL: &[u8; 4] = b"GSCM";
const TAG_PROBE: &[u8; 4] = b"PROB";
const TAG_ENCODER: &[u8; 4] = b"FENC";

/// Contents of one container file: a dataset (possibly empty) and optional
/// score model, probe and encoder sections.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub dataset: ProvenancedDataset,
    pub model: Option<GaussianScoreModel>,
    pub probe: Option<ProbeClassifier>,
    pub encoder: Option<FrozenEncoder>,
}

impl Container {
    pub fn with_dataset(dataset: ProvenancedDataset) -> Self {
        Self { dataset, model: None, probe: None, encoder: None }
    }
}

struct Buf(Vec<u8>);

impl Buf {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn vector(&mut self, v: &DVector<f64>) {
        self.u64(v.len() as u64);
        v.iter().for_each(|&x| self.f64(x));
    }
    /// Row-major with a rows/cols header.
    fn matrix(&mut self, m: &DMatrix<f64>) {
        self.u64(m.nrows() as u64);
        self.u64(m.ncols() as u64);
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                self.f64(m[(i, j)]);
            }
        }
    }
    fn section(&mut self, tag: &[u8; 4], body: Buf) {
        self.0.extend_from_slice(tag);
        self.u64(body.0.len() as u64);
        self.0.extend_from_slice(&body.0);
    }
}

struct Cursor<'a> {
    data: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.at < n {
            return Err(Error::Format(format!("truncated container at byte {}", self.at)));
        }
        let s = &self.data[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
    fn arr<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.arr()?))
    }
    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.arr()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.arr()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.arr()?))
    }
    fn len(&mut self, elem: usize) -> Result<usize> {
        let n = self.u64()?;
        let n = usize::try_from(n).map_err(|_| Error::Format("length overflow".into()))?;
        if n.saturating_mul(elem) > self.data.len() - self.at {
            return Err(Error::Format(format!("declared length {n} exceeds remaining bytes")));
        }
        Ok(n)
    }
    fn vector(&mut self) -> Result<DVector<f64>> {
        let n = self.len(8)?;
        let v: Vec<f64> = (0..n).map(|_| self.f64()).collect::<Result<_>>()?;
        Ok(DVector::from_vec(v))
    }
    fn matrix(&mut self) -> Result<DMatrix<f64>> {
        let rows = self.len(0)?;
        let cols = self.len(0)?;
        if rows.saturating_mul(cols).saturating_mul(8) > self.data.len() - self.at {
            return Err(Error::Format("matrix larger than remaining bytes".into()));
        }
        let v: Vec<f64> = (0..rows * cols).map(|_| self.f64()).collect::<Result<_>>()?;
        Ok(DMatrix::from_row_slice(rows, cols, &v))
    }
    fn done(&self) -> bool {
        self.at == self.data.len()
    }
}

fn encode_schedule(b: &mut Buf, s: &NoiseSchedule) {
    b.u64(s.steps() as u64);
    b.f64(s.beta_start());
    b.f64(s.beta_end());
}

fn decode_schedule(c: &mut Cursor) -> Result<NoiseSchedule> {
    let t = c.len(0)?;
    let b0 = c.f64()?;
    let b1 = c.f64()?;
    NoiseSchedule::linear(t, b0, b1)
}

pub fn encode_container(c: &Container) -> Vec<u8> {
    let ds = &c.dataset;
    let mut b = Buf(Vec::new());
    b.0.extend_from_slice(MAGIC);
    b.u32(VERSION);
    b.u64(ds.len() as u64);
    b.u64(ds.dim() as u64);
    for i in 0..ds.len() {
        for k in 0..ds.dim() {
            b.f64(ds.features[(k, i)]);
        }
    }
    for i in 0..ds.len() {
        b.i32(ds.labels[i] as i32);
        b.i32(ds.generations[i] as i32);
        b.u8(u8::from(ds.real[i]));
    }
    if let Some(m) = &c.model {
        let mut s = Buf(Vec::new());
        s.u64(m.dim() as u64);
        s.u64(m.components().len() as u64);
        for comp in m.components() {
            s.f64(comp.weight);
            s.f64(comp.residual);
            s.vector(&comp.mean);
            s.matrix(&comp.basis);
            s.vector(&comp.excess);
        }
        b.section(TAG_MODEL, s);
    }
    if let Some(p) = &c.probe {
        let mut s = Buf(Vec::new());
        s.u64(p.timestep as u64);
        s.matrix(&p.weights);
        s.vector(&p.biases);
        b.section(TAG_PROBE, s);
    }
    if let Some(e) = &c.encoder {
        let mut s = Buf(Vec::new());
        s.matrix(e.projection());
        s.vector(e.center());
        encode_schedule(&mut s, e.schedule());
        b.section(TAG_ENCODER, s);
    }
    b.0
}

pub fn decode_container(bytes: &[u8]) -> Result<Container> {
    let mut c = Cursor { data: bytes, at: 0 };
    if &c.arr::<4>()? != MAGIC {
        return Err(Error::Format("bad magic, not an LSFD container".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let n = c.len(0)?;
    let d = c.len(0)?;
    if n.saturating_mul(d.saturating_mul(8).saturating_add(9)) > bytes.len() - c.at {
        return Err(Error::Format("declared sample count exceeds file size".into()));
    }
    let mut features = DMatrix::zeros(d, n);
    for i in 0..n {
        for k in 0..d {
            features[(k, i)] = c.f64()?;
        }
    }
    let (mut labels, mut gens, mut real) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let (y, g, r) = (c.i32()?, c.i32()?, c.u8()?);
        if y < 0 || g < 0 || r > 1 {
            return Err(Error::Format(format!("bad sample record (label {y}, generation {g}, real {r})")));
        }
        labels.push(y as usize);
        gens.push(g as u32);
        real.push(r == 1);
    }
    let dataset = ProvenancedDataset::new(features, labels, gens, real)?;
    let mut out = Container::with_dataset(dataset);
    while !c.done() {
        let tag = c.arr::<4>()?;
        let len = c.len(1)?;
        let mut s = Cursor { data: c.take(len)?, at: 0 };
        match &tag {
            t if t == TAG_MODEL => {
                let dim = s.len(0)?;
                let k = s.len(0)?;
                let mut comps = Vec::with_capacity(k);
                for _ in 0..k {
                    let weight = s.f64()?;
                    let residual = s.f64()?;
                    let mean = s.vector()?;
                    let basis = s.matrix()?;
                    let excess = s.vector()?;
                    comps.push(GaussianComponent::new(weight, mean, basis, excess, residual)?);
                }
                let model = GaussianScoreModel::new(comps)?;
                numerics::check_dims("model dimension", model.dim(), dim)?;
                out.model = Some(model);
            }
            t if t == TAG_PROBE => {
                let timestep = s.len(0)?;
                let weights = s.matrix()?;
                let biases = s.vector()?;
                out.probe = Some(ProbeClassifier::new(weights, biases, timestep)?);
            }
            t if t == TAG_ENCODER => {
                let w = s.matrix()?;
                let center = s.vector()?;
                let schedule = decode_schedule(&mut s)?;
                out.encoder = Some(FrozenEncoder::new(w, center, schedule)?);
            }
            other => {
                return Err(Error::Format(format!("unknown section tag {:?}", String::from_utf8_lossy(other))));
            }
        }
        if !s.done() {
            return Err(Error::Format("trailing bytes inside section".into()));
        }
    }
    Ok(out)
}

pub fn write_container<W: Write>(mut w: W, c: &Container) -> Result<()> {
    w.write_all(&encode_container(c))?;
    Ok(())
}

pub fn read_container<R: Read>(mut r: R) -> Result<Container> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode_container(&bytes)
}
