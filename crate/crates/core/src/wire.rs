//! Binary frames exchanged between nodes, and the model file built on them.
//!
//! ```text
//! frame   = magic u16 (0xFF50) | version u8 | msg_type u8 | payload_len u32
//!           | payload | crc64 u64
//! ```
//!
//! All integers and floats are little-endian. The CRC-64/XZ checksum covers
//! every byte before it. A layer snapshot carries the complete layer state
//! including Adam moments, so a receiver continues training exactly where
//! the sender stopped.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crc::{Crc, CRC_64_XZ};

use crate::adam::{AdamConfig, AdamState};
use crate::classify::SoftmaxHead;
use crate::error::{Error, Result};
use crate::ff::FFLayer;
use crate::model::{Model, Stage};
use crate::perfopt::{PerLayerHead, PerfoptReadout};
use crate::plan::ClassifierMode;
use crate::real::Real;
use crate::tensor::Matrix;

pub const MAGIC: u16 = 0xFF50;
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 8;
pub const TRAILER_LEN: usize = 8;
/// Largest payload a decoder accepts.
pub const MAX_PAYLOAD: usize = 1 << 31;

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

pub fn checksum(bytes: &[u8]) -> u64 {
    CRC64.checksum(bytes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum MsgType {
    LayerSnapshot = 0x01,
    NegLabels = 0x02,
    Control = 0x03,
    MetricsSample = 0x04,
}

impl MsgType {
    pub fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            0x01 => MsgType::LayerSnapshot,
            0x02 => MsgType::NegLabels,
            0x03 => MsgType::Control,
            0x04 => MsgType::MetricsSample,
            other => return Err(Error::Frame(format!("unknown message type {other:#04x}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(msg_type: MsgType, payload: Vec<u8>) -> Self {
        Frame { msg_type, payload }
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len() + TRAILER_LEN
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&MAGIC.to_le_bytes());
        out.push(VERSION);
        out.push(self.msg_type as u8);
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        let crc = checksum(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Validates a header and returns the message type and payload length.
    pub fn parse_header(header: &[u8]) -> Result<(MsgType, usize)> {
        if header.len() < HEADER_LEN {
            return Err(Error::Frame(format!("header needs {HEADER_LEN} bytes, got {}", header.len())));
        }
        let magic = u16::from_le_bytes([header[0], header[1]]);
        if magic != MAGIC {
            return Err(Error::Frame(format!("bad magic {magic:#06x}")));
        }
        if header[2] != VERSION {
            return Err(Error::Frame(format!("unsupported version {}", header[2])));
        }
        let msg_type = MsgType::from_u8(header[3])?;
        let len = u32::from_le_bytes([header[4], header[5], header[6], header[7]]) as usize;
        if len > MAX_PAYLOAD {
            return Err(Error::Frame(format!("payload of {len} bytes is too large")));
        }
        Ok((msg_type, len))
    }

    /// Decodes one frame from the front of `bytes`; returns it with the
    /// number of bytes consumed.
    pub fn decode_prefix(bytes: &[u8]) -> Result<(Frame, usize)> {
        let (msg_type, len) = Self::parse_header(bytes)?;
        let total = HEADER_LEN + len + TRAILER_LEN;
        if bytes.len() < total {
            return Err(Error::Frame(format!("truncated frame: need {total} bytes, have {}", bytes.len())));
        }
        let body = &bytes[..HEADER_LEN + len];
        let mut crc = [0u8; 8];
        crc.copy_from_slice(&bytes[HEADER_LEN + len..total]);
        let expected = u64::from_le_bytes(crc);
        let actual = checksum(body);
        if expected != actual {
            return Err(Error::Checksum { expected, actual });
        }
        Ok((
            Frame {
                msg_type,
                payload: body[HEADER_LEN..].to_vec(),
            },
            total,
        ))
    }

    /// Decodes exactly one frame.
    pub fn decode(bytes: &[u8]) -> Result<Frame> {
        let (frame, used) = Self::decode_prefix(bytes)?;
        if used != bytes.len() {
            return Err(Error::Frame(format!("{} trailing bytes after frame", bytes.len() - used)));
        }
        Ok(frame)
    }
}

struct Writer {
    out: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { out: Vec::new() }
    }
    fn u8(&mut self, v: u8) {
        self.out.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.out.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.out.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.out.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.out.extend_from_slice(&v.to_le_bytes());
    }
    fn reals<R: Real>(&mut self, m: &Matrix<R>) {
        self.out.reserve(m.as_slice().len() * R::BYTES);
        for &v in m.as_slice() {
            v.put_le(&mut self.out);
        }
    }
    fn str(&mut self, s: &str) {
        let b = s.as_bytes();
        let n = b.len().min(u16::MAX as usize);
        self.u16(n as u16);
        self.out.extend_from_slice(&b[..n]);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Frame(format!("payload ends at byte {}, wanted {n} more at {}", self.buf.len(), self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
    fn u64(&mut self) -> Result<u64> {
        let mut a = [0u8; 8];
        a.copy_from_slice(self.take(8)?);
        Ok(u64::from_le_bytes(a))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn reals<R: Real>(&mut self, rows: usize, cols: usize) -> Result<Matrix<R>> {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Frame(format!("matrix {rows}x{cols} overflows")))?;
        let bytes = self.take(n.checked_mul(R::BYTES).ok_or_else(|| Error::Frame("matrix too large".into()))?)?;
        let data = bytes.chunks_exact(R::BYTES).map(R::get_le).collect();
        Matrix::from_vec(rows, cols, data)
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Frame("text is not UTF-8".into()))
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Frame(format!("{} unread payload bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn dim_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Frame(format!("dimension {v} does not fit the wire format")))
}

fn write_params<R: Real>(w: &mut Writer, weights: &Matrix<R>, bias: &Matrix<R>, aw: &AdamState<R>, ab: &AdamState<R>) {
    w.reals(weights);
    w.reals(bias);
    w.reals(&aw.m);
    w.reals(&aw.v);
    w.u64(aw.t);
    w.reals(&ab.m);
    w.reals(&ab.v);
    w.u64(ab.t);
}

type Params<R> = (Matrix<R>, Matrix<R>, AdamState<R>, AdamState<R>);

fn read_params<R: Real>(r: &mut Reader<'_>, rows: usize, cols: usize, adam: AdamConfig) -> Result<Params<R>> {
    let weights = r.reals(rows, cols)?;
    let bias = r.reals(1, cols)?;
    let aw = AdamState {
        m: r.reals(rows, cols)?,
        v: r.reals(rows, cols)?,
        t: r.u64()?,
        config: adam,
    };
    let ab = AdamState {
        m: r.reals(1, cols)?,
        v: r.reals(1, cols)?,
        t: r.u64()?,
        config: adam,
    };
    Ok((weights, bias, aw, ab))
}

const ATTACH_PROBE: u8 = 1;
const ATTACH_HEAD: u8 = 2;

/// A stage as published after `chapter` (0 for the initial state).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSnapshot<R> {
    pub chapter: u16,
    pub stage: Stage<R>,
}

impl<R: Real> LayerSnapshot<R> {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let s = &self.stage;
        let l = &s.layer;
        let mut w = Writer::new();
        w.u16(u16::try_from(s.index).map_err(|_| Error::Frame("layer index too large".into()))?);
        w.u16(self.chapter);
        w.u32(dim_u32(l.in_dim())?);
        w.u32(dim_u32(l.out_dim())?);
        w.u8(R::WIRE_FLAG);
        write_params(&mut w, &l.weights, &l.bias, &l.adam_w, &l.adam_b);
        let adam = l.adam_w.config;
        w.f64(l.theta);
        w.f64(adam.beta1);
        w.f64(adam.beta2);
        w.f64(adam.eps);
        w.u8(s.probe.is_some() as u8 + s.head.is_some() as u8);
        if let Some(p) = &s.probe {
            w.u8(ATTACH_PROBE);
            w.u32(dim_u32(p.weights.rows())?);
            w.u32(dim_u32(p.weights.cols())?);
            write_params(&mut w, &p.weights, &p.bias, &p.adam_w, &p.adam_b);
            w.u16(p.layer_index as u16);
        }
        if let Some(h) = &s.head {
            w.u8(ATTACH_HEAD);
            w.u32(dim_u32(h.weights.rows())?);
            w.u32(dim_u32(h.weights.cols())?);
            write_params(&mut w, &h.weights, &h.bias, &h.adam_w, &h.adam_b);
            w.u16(h.input_layers.len() as u16);
            for &i in &h.input_layers {
                w.u16(i as u16);
            }
        }
        Ok(w.out)
    }

    pub fn decode(payload: &[u8]) -> Result<Self> {
        let mut r = Reader::new(payload);
        let index = r.u16()? as usize;
        let chapter = r.u16()?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let flag = r.u8()?;
        if flag != R::WIRE_FLAG {
            return Err(Error::Frame(format!(
                "snapshot holds {}-byte floats, decoder expects {}",
                if flag == 0 { 4 } else { 8 },
                R::BYTES
            )));
        }
        // validate the declared size before allocating
        let need = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(3))
            .and_then(|n| n.checked_mul(R::BYTES));
        match need {
            Some(n) if n <= payload.len() => {}
            _ => return Err(Error::Frame(format!("snapshot declares {rows}x{cols} but carries {} bytes", payload.len()))),
        }
        let (weights, bias, mut adam_w, mut adam_b) = read_params::<R>(&mut r, rows, cols, AdamConfig::default())?;
        let theta = r.f64()?;
        let adam = AdamConfig {
            beta1: r.f64()?,
            beta2: r.f64()?,
            eps: r.f64()?,
        };
        adam_w.config = adam;
        adam_b.config = adam;
        let layer = FFLayer {
            weights,
            bias,
            adam_w,
            adam_b,
            theta,
        };
        let mut probe = None;
        let mut head = None;
        for _ in 0..r.u8()? {
            let kind = r.u8()?;
            let hr = r.u32()? as usize;
            let hc = r.u32()? as usize;
            if hr.saturating_mul(hc).saturating_mul(R::BYTES) > payload.len() {
                return Err(Error::Frame(format!("attachment declares {hr}x{hc}")));
            }
            let (weights, bias, adam_w, adam_b) = read_params::<R>(&mut r, hr, hc, adam)?;
            match kind {
                ATTACH_PROBE if probe.is_none() => {
                    probe = Some(PerLayerHead {
                        weights,
                        bias,
                        adam_w,
                        adam_b,
                        layer_index: r.u16()? as usize,
                    });
                }
                ATTACH_HEAD if head.is_none() => {
                    let n = r.u16()? as usize;
                    let input_layers = (0..n).map(|_| r.u16().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
                    head = Some(SoftmaxHead {
                        weights,
                        bias,
                        adam_w,
                        adam_b,
                        input_layers,
                    });
                }
                other => return Err(Error::Frame(format!("unexpected attachment kind {other}"))),
            }
        }
        r.finish()?;
        Ok(LayerSnapshot {
            chapter,
            stage: Stage {
                index,
                layer,
                probe,
                head,
            },
        })
    }
}

/// Negative labels to be used in `chapter`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NegLabels {
    pub chapter: u16,
    pub num_classes: u16,
    pub labels: Vec<u8>,
}

impl NegLabels {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u16(self.chapter);
        w.u16(self.num_classes);
        w.u32(self.labels.len() as u32);
        w.out.extend_from_slice(&self.labels);
        w.out
    }

    pub fn decode(payload: &[u8]) -> Result<Self> {
        let mut r = Reader::new(payload);
        let chapter = r.u16()?;
        let num_classes = r.u16()?;
        let n = r.u32()? as usize;
        let labels = r.take(n)?.to_vec();
        r.finish()?;
        Ok(NegLabels {
            chapter,
            num_classes,
            labels,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum ControlKind {
    /// First frame on a new connection.
    Hello = 1,
    /// The sender has finished its schedule.
    Done = 2,
    /// The sender failed; receivers should stop.
    Abort = 3,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Control {
    pub kind: ControlKind,
    pub node: u16,
    pub text: String,
}

impl Control {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(self.kind as u8);
        w.u16(self.node);
        w.str(&self.text);
        w.out
    }

    pub fn decode(payload: &[u8]) -> Result<Self> {
        let mut r = Reader::new(payload);
        let kind = match r.u8()? {
            1 => ControlKind::Hello,
            2 => ControlKind::Done,
            3 => ControlKind::Abort,
            k => return Err(Error::Frame(format!("unknown control kind {k}"))),
        };
        let node = r.u16()?;
        let text = r.str()?;
        r.finish()?;
        Ok(Control { kind, node, text })
    }
}

/// One metrics row reported by a worker.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsSample {
    pub node: u16,
    pub chapter: u16,
    pub epoch: u32,
    pub layer: u16,
    pub loss: f64,
    /// NaN when not measured.
    pub acc: f64,
    pub busy_ms: f64,
    pub idle_ms: f64,
    pub comm_ms: f64,
    pub wall_ms: f64,
}

impl MetricsSample {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u16(self.node);
        w.u16(self.chapter);
        w.u32(self.epoch);
        w.u16(self.layer);
        for v in [self.loss, self.acc, self.busy_ms, self.idle_ms, self.comm_ms, self.wall_ms] {
            w.f64(v);
        }
        w.out
    }

    pub fn decode(payload: &[u8]) -> Result<Self> {
        let mut r = Reader::new(payload);
        let m = MetricsSample {
            node: r.u16()?,
            chapter: r.u16()?,
            epoch: r.u32()?,
            layer: r.u16()?,
            loss: r.f64()?,
            acc: r.f64()?,
            busy_ms: r.f64()?,
            idle_ms: r.f64()?,
            comm_ms: r.f64()?,
            wall_ms: r.f64()?,
        };
        r.finish()?;
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Message<R> {
    Layer(LayerSnapshot<R>),
    Neg(NegLabels),
    Control(Control),
    Metrics(MetricsSample),
}

impl<R: Real> Message<R> {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Message::Layer(_) => MsgType::LayerSnapshot,
            Message::Neg(_) => MsgType::NegLabels,
            Message::Control(_) => MsgType::Control,
            Message::Metrics(_) => MsgType::MetricsSample,
        }
    }

    pub fn to_frame(&self) -> Result<Frame> {
        let payload = match self {
            Message::Layer(s) => s.encode()?,
            Message::Neg(n) => n.encode(),
            Message::Control(c) => c.encode(),
            Message::Metrics(m) => m.encode(),
        };
        Ok(Frame::new(self.msg_type(), payload))
    }

    pub fn from_frame(frame: &Frame) -> Result<Self> {
        Ok(match frame.msg_type {
            MsgType::LayerSnapshot => Message::Layer(LayerSnapshot::decode(&frame.payload)?),
            MsgType::NegLabels => Message::Neg(NegLabels::decode(&frame.payload)?),
            MsgType::Control => Message::Control(Control::decode(&frame.payload)?),
            MsgType::MetricsSample => Message::Metrics(MetricsSample::decode(&frame.payload)?),
        })
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        Ok(self.to_frame()?.encode())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        Self::from_frame(&Frame::decode(bytes)?)
    }
}

const MODEL_MAGIC: &[u8; 4] = b"FFPM";
const MODEL_VERSION: u8 = 1;

fn classifier_code(c: ClassifierMode) -> u8 {
    match c {
        ClassifierMode::Goodness => 0,
        ClassifierMode::Softmax => 1,
        ClassifierMode::Perfopt(PerfoptReadout::LastLayer) => 2,
        ClassifierMode::Perfopt(PerfoptReadout::AllLayers) => 3,
    }
}

/// Model file: `"FFPM" | version u8 | float flag u8 | classes u16 |
/// classifier u8 | layers u16`, then one snapshot frame per layer.
pub fn encode_model<R: Real>(model: &Model<R>, chapter: u16) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    w.out.extend_from_slice(MODEL_MAGIC);
    w.u8(MODEL_VERSION);
    w.u8(R::WIRE_FLAG);
    w.u16(model.num_classes as u16);
    w.u8(classifier_code(model.classifier));
    w.u16(model.depth() as u16);
    for i in 0..model.depth() {
        let snap = LayerSnapshot {
            chapter,
            stage: model.stage(i),
        };
        w.out.extend(Message::Layer(snap).encode()?);
    }
    Ok(w.out)
}

pub fn decode_model<R: Real>(bytes: &[u8]) -> Result<Model<R>> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != MODEL_MAGIC {
        return Err(Error::Frame("not a model file".into()));
    }
    let version = r.u8()?;
    if version != MODEL_VERSION {
        return Err(Error::Frame(format!("unsupported model file version {version}")));
    }
    if r.u8()? != R::WIRE_FLAG {
        return Err(Error::Frame(format!("model file float width differs from the requested {}-byte type", R::BYTES)));
    }
    let num_classes = r.u16()? as usize;
    let classifier = match r.u8()? {
        0 => ClassifierMode::Goodness,
        1 => ClassifierMode::Softmax,
        2 => ClassifierMode::Perfopt(PerfoptReadout::LastLayer),
        3 => ClassifierMode::Perfopt(PerfoptReadout::AllLayers),
        c => return Err(Error::Frame(format!("unknown classifier code {c}"))),
    };
    let n = r.u16()? as usize;
    let mut rest = &bytes[r.pos..];
    let mut stages = Vec::with_capacity(n);
    for _ in 0..n {
        let (frame, used) = Frame::decode_prefix(rest)?;
        match Message::<R>::from_frame(&frame)? {
            Message::Layer(s) => stages.push(s.stage),
            _ => return Err(Error::Frame("model file holds a non-layer frame".into())),
        }
        rest = &rest[used..];
    }
    if !rest.is_empty() {
        return Err(Error::Frame(format!("{} trailing bytes in model file", rest.len())));
    }
    Model::from_stages(stages, num_classes, classifier)
}

/// Size in bytes of a stage snapshot frame, computed without encoding.
pub fn snapshot_frame_len<R: Real>(stage: &Stage<R>) -> usize {
    let param_len = |rows: usize, cols: usize| (3 * rows * cols + 3 * cols) * R::BYTES + 16;
    let l = &stage.layer;
    let mut n = 13 + param_len(l.in_dim(), l.out_dim()) + 32 + 1;
    if let Some(p) = &stage.probe {
        n += 9 + param_len(p.weights.rows(), p.weights.cols()) + 2;
    }
    if let Some(h) = &stage.head {
        n += 9 + param_len(h.weights.rows(), h.weights.cols()) + 2 + 2 * h.input_layers.len();
    }
    HEADER_LEN + n + TRAILER_LEN
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::TrainingPlan;
    use alloc::vec;

    fn stage(classifier: ClassifierMode) -> Stage<f64> {
        let plan = TrainingPlan {
            layer_dims: vec![10, 6, 5],
            num_classes: 3,
            classifier,
            ..TrainingPlan::desk()
        };
        let mut m = Model::<f64>::init(&plan).unwrap();
        m.layers[1].adam_w.t = 17;
        m.layers[1].adam_w.m.set(0, 0, 0.25);
        m.stage(1)
    }

    #[test]
    fn frame_layout_is_little_endian() {
        let f = Frame::new(MsgType::Control, vec![1, 2, 3]);
        let b = f.encode();
        assert_eq!(&b[..8], &[0x50, 0xFF, 1, 3, 3, 0, 0, 0]);
        assert_eq!(&b[8..11], &[1, 2, 3]);
        assert_eq!(b.len(), 19);
        assert_eq!(u64::from_le_bytes(b[11..].try_into().unwrap()), checksum(&b[..11]));
        assert_eq!(Frame::decode(&b).unwrap(), f);
    }

    #[test]
    fn crc_matches_reference_check_value() {
        // CRC-64/XZ check value for "123456789"
        assert_eq!(checksum(b"123456789"), 0x995D_C9BB_DF19_39FA);
    }

    #[test]
    fn snapshot_round_trips_with_attachments() {
        for c in [
            ClassifierMode::Goodness,
            ClassifierMode::Softmax,
            ClassifierMode::Perfopt(PerfoptReadout::AllLayers),
        ] {
            let snap = LayerSnapshot {
                chapter: 9,
                stage: stage(c),
            };
            let msg = Message::Layer(snap.clone());
            let bytes = msg.encode().unwrap();
            assert_eq!(bytes.len(), snapshot_frame_len(&snap.stage));
            assert_eq!(Message::<f64>::decode(&bytes).unwrap(), msg);
        }
    }

    #[test]
    fn snapshot_prefix_matches_declared_layout() {
        let snap = LayerSnapshot {
            chapter: 0x0102,
            stage: stage(ClassifierMode::Goodness),
        };
        let p = snap.encode().unwrap();
        assert_eq!(&p[..13], &[1, 0, 2, 1, 6, 0, 0, 0, 5, 0, 0, 0, 1]);
        let w0 = f64::from_le_bytes(p[13..21].try_into().unwrap());
        assert_eq!(w0, snap.stage.layer.weights.get(0, 0));
    }

    #[test]
    fn f32_snapshot_refuses_f64_decoder() {
        let s = stage(ClassifierMode::Goodness);
        let s32 = Stage {
            index: 0,
            layer: FFLayer {
                weights: s.layer.weights.cast::<f32>(),
                bias: s.layer.bias.cast::<f32>(),
                adam_w: AdamState::new(6, 5, AdamConfig::default()),
                adam_b: AdamState::new(1, 5, AdamConfig::default()),
                theta: 0.01,
            },
            probe: None,
            head: None,
        };
        let p = LayerSnapshot { chapter: 1, stage: s32 }.encode().unwrap();
        assert!(LayerSnapshot::<f32>::decode(&p).is_ok());
        assert!(LayerSnapshot::<f64>::decode(&p).is_err());
    }

    #[test]
    fn every_corrupted_byte_is_caught() {
        let bytes = Message::Layer(LayerSnapshot {
            chapter: 1,
            stage: stage(ClassifierMode::Goodness),
        })
        .encode()
        .unwrap();
        for at in (0..bytes.len()).step_by(7) {
            let mut b = bytes.clone();
            b[at] ^= 0x5a;
            assert!(Frame::decode(&b).is_err(), "flip at {at}");
        }
    }

    #[test]
    fn truncation_and_garbage_are_errors() {
        let bytes = Message::<f64>::Neg(NegLabels {
            chapter: 3,
            num_classes: 10,
            labels: vec![1, 2, 3],
        })
        .encode()
        .unwrap();
        for cut in 0..bytes.len() {
            assert!(Frame::decode(&bytes[..cut]).is_err());
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Frame::decode(&extra).is_err());
        // valid frame, nonsense payload
        let f = Frame::new(MsgType::LayerSnapshot, vec![0xff; 20]).encode();
        assert!(Message::<f64>::decode(&f).is_err());
        let f = Frame::new(MsgType::Control, vec![9, 0, 0, 0, 0]).encode();
        assert!(Message::<f64>::decode(&f).is_err());
        let mut bad_type = Frame::new(MsgType::Control, vec![]).encode();
        bad_type[3] = 0x07;
        assert!(Frame::decode(&bad_type).is_err());
    }

    #[test]
    fn small_messages_round_trip() {
        let msgs: Vec<Message<f32>> = vec![
            Message::Control(Control {
                kind: ControlKind::Abort,
                node: 3,
                text: "node 3: out of memory".into(),
            }),
            Message::Metrics(MetricsSample {
                node: 1,
                chapter: 2,
                epoch: 3,
                layer: 1,
                loss: 0.5,
                acc: f64::NAN,
                busy_ms: 1.0,
                idle_ms: 2.0,
                comm_ms: 0.5,
                wall_ms: 3.5,
            }),
        ];
        for m in msgs {
            let back = Message::<f32>::decode(&m.encode().unwrap()).unwrap();
            match (&m, &back) {
                (Message::Metrics(a), Message::Metrics(b)) => {
                    assert!(b.acc.is_nan());
                    assert_eq!((a.node, a.epoch, a.wall_ms), (b.node, b.epoch, b.wall_ms));
                }
                _ => assert_eq!(m, back),
            }
        }
    }

    #[test]
    fn model_file_round_trips() {
        let plan = TrainingPlan {
            layer_dims: vec![12, 7, 6, 5],
            num_classes: 4,
            classifier: ClassifierMode::Softmax,
            ..TrainingPlan::desk()
        };
        let m = Model::<f64>::init(&plan).unwrap();
        let bytes = encode_model(&m, 20).unwrap();
        assert_eq!(decode_model::<f64>(&bytes).unwrap(), m);
        assert!(decode_model::<f32>(&bytes).is_err());
        assert!(decode_model::<f64>(&bytes[..bytes.len() - 1]).is_err());
    }
}
