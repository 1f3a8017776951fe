//! Stand-in graph-transformer teacher and its trace file format.
//!
//! The teacher attends over `n + 1` tokens (virtual node first) with a
//! learned scalar per head and shortest-path bucket added to the logits.
//! Traces record, for chosen layers, the virtual-node embedding and the
//! attention weights, so an external teacher can supply the same targets.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{layer_with_bias, register_layer, resolve_layer, LayerParams, LogitBias, ModelError, LN_EPS};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::embedding::INIT_STD;
use crate::smiles::{GraphFeatures, SpdBucket, CHARGE_BUCKETS, DEGREE_BUCKETS};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, TensorError, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_k: usize,
    pub ffn: usize,
    pub layers: usize,
    pub out_dim: usize,
    pub max_atomic_number: u8,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig { d_model: 64, heads: 4, d_k: 16, ffn: 256, layers: 4, out_dim: 1, max_atomic_number: 53 }
    }
}

impl TeacherConfig {
    /// Rows of the combined atom-feature table: virtual, elements,
    /// charges, aromatic flag, degrees.
    fn table_rows(&self) -> usize {
        1 + self.max_atomic_number as usize + 1 + CHARGE_BUCKETS + 2 + DEGREE_BUCKETS
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherModel {
    pub config: TeacherConfig,
    pub params: ParamStore,
    pub atom_table: ParamId,
    pub spd_bias: Vec<ParamId>,
    pub layers: Vec<LayerParams>,
    pub final_ln: (ParamId, ParamId),
    pub head: (ParamId, ParamId),
}

const TEACHER_KIND: &str = "stkd-teacher";

/// Teacher forward pass on a tape.
#[derive(Clone, Debug)]
pub struct TeacherOutput {
    pub prediction: Var,
    /// Virtual-node row (`1 x d_V`) after each layer.
    pub virtual_rows: Vec<Var>,
    /// Per-layer attention weights, one `l x l` matrix per head.
    pub attn: Vec<Vec<Var>>,
}

impl TeacherModel {
    pub fn new(config: TeacherConfig, seed: u64) -> TeacherModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        store.add_normal("teacher.atom_table", &[c.table_rows(), c.d_model], INIT_STD, &mut rng);
        for i in 0..c.layers {
            store.add_filled(format!("teacher.layer{i}.spd"), &[c.heads * SpdBucket::COUNT], 0.0);
            register_layer(&mut store, &format!("teacher.layer{i}"), c.d_model, c.heads, c.d_k, c.d_k, c.ffn, false, &mut rng);
        }
        store.add_filled("teacher.final_ln.gamma", &[c.d_model], 1.0);
        store.add_filled("teacher.final_ln.beta", &[c.d_model], 0.0);
        store.add_normal("teacher.head.w", &[c.d_model, c.out_dim], (1.0 / c.d_model as f64).sqrt(), &mut rng);
        store.add_filled("teacher.head.b", &[c.out_dim], 0.0);
        TeacherModel::from_parts(config, store).expect("freshly registered layout")
    }

    pub fn from_parts(config: TeacherConfig, params: ParamStore) -> Result<TeacherModel, TensorError> {
        let c = &config;
        let atom_table = params.id("teacher.atom_table")?;
        let spd_bias = (0..c.layers).map(|i| params.id(&format!("teacher.layer{i}.spd"))).collect::<Result<_, _>>()?;
        let layers = (0..c.layers)
            .map(|i| resolve_layer(&params, &format!("teacher.layer{i}"), c.heads, c.d_k, c.d_k))
            .collect::<Result<_, _>>()?;
        let final_ln = (params.id("teacher.final_ln.gamma")?, params.id("teacher.final_ln.beta")?);
        let head = (params.id("teacher.head.w")?, params.id("teacher.head.b")?);
        Ok(TeacherModel { config, params, atom_table, spd_bias, layers, final_ln, head })
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        let meta = serde_json::json!({ "kind": TEACHER_KIND, "config": self.config, "extra": extra });
        Checkpoint { meta, params: self.params.clone() }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<(TeacherModel, serde_json::Value), ModelError> {
        if ck.meta.get("kind").and_then(|k| k.as_str()) != Some(TEACHER_KIND) {
            return Err(ModelError::WrongKind { expected: TEACHER_KIND });
        }
        let config: TeacherConfig = serde_json::from_value(ck.meta["config"].clone()).map_err(CheckpointError::from)?;
        let extra = ck.meta.get("extra").cloned().unwrap_or(serde_json::Value::Null);
        Ok((TeacherModel::from_parts(config, ck.params)?, extra))
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<(), ModelError> {
        Ok(self.to_checkpoint(extra).save(path)?)
    }

    pub fn load(path: &Path) -> Result<(TeacherModel, serde_json::Value), ModelError> {
        TeacherModel::from_checkpoint(Checkpoint::load(path)?)
    }

    /// Records the teacher's forward pass on `tape`.
    pub fn forward(&self, tape: &mut Tape, g: &GraphFeatures) -> Result<TeacherOutput, TensorError> {
        let c = &self.config;
        let elem0 = 1;
        let charge0 = elem0 + c.max_atomic_number as usize + 1;
        let arom0 = charge0 + CHARGE_BUCKETS;
        let deg0 = arom0 + 2;
        let mut rows = Vec::with_capacity(g.len());
        rows.push(vec![0]);
        for i in 0..g.n {
            rows.push(vec![elem0 + g.element[i], charge0 + g.charge[i], arom0 + g.aromatic[i], deg0 + g.degree[i]]);
        }
        let table = tape.param(self.atom_table);
        let mut h = tape.gather_sum(table, rows)?;

        let l = g.len();
        let mut virtual_rows = Vec::with_capacity(c.layers);
        let mut attn = Vec::with_capacity(c.layers);
        for (layer, &spd) in self.layers.iter().zip(&self.spd_bias) {
            let spd = tape.param(spd);
            let mut fixed = Vec::with_capacity(c.heads);
            for head in 0..c.heads {
                let idx = g.spd.iter().map(|&b| head * SpdBucket::COUNT + b).collect();
                fixed.push(tape.gather_elems(spd, idx, &[l, l])?);
            }
            let (out, state) = layer_with_bias(tape, h, layer, LogitBias::Fixed(&fixed))?;
            h = out;
            virtual_rows.push(tape.row(h, 0)?);
            attn.push(state.attn);
        }
        let (gm, bt) = (tape.param(self.final_ln.0), tape.param(self.final_ln.1));
        let z = tape.layer_norm(*virtual_rows.last().expect("at least one layer"), gm, bt, LN_EPS)?;
        let (w, b) = (tape.param(self.head.0), tape.param(self.head.1));
        let y = tape.matmul(z, w)?;
        let prediction = tape.add_row(y, b)?;
        Ok(TeacherOutput { prediction, virtual_rows, attn })
    }
}

/// One designated teacher layer's outputs for one molecule.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceLayer {
    pub p: usize,
    /// Virtual-node embedding, length `d_V`.
    pub x0: Vec<f64>,
    /// Attention weights, shape `[h', l_G, l_G]`.
    pub attn: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherTrace {
    pub key: u64,
    pub n: usize,
    pub layers: Vec<TraceLayer>,
}

impl TeacherTrace {
    pub fn l_graph(&self) -> usize {
        self.n + 1
    }

    pub fn layer(&self, p: usize) -> Result<&TraceLayer, TraceError> {
        self.layers.iter().find(|t| t.p == p).ok_or(TraceError::MissingLayer { key: self.key, p })
    }
}

/// Runs the teacher and keeps the outputs of `layers` as a trace keyed by
/// `key`. Returns the prediction too.
pub fn teacher_forward(
    model: &TeacherModel,
    g: &GraphFeatures,
    key: u64,
    layers: &[usize],
) -> Result<(Vec<f64>, TeacherTrace), TensorError> {
    let mut tape = Tape::new(&model.params);
    let out = model.forward(&mut tape, g)?;
    let l = g.len();
    let mut trace = TeacherTrace { key, n: g.n, layers: Vec::with_capacity(layers.len()) };
    for &p in layers {
        let mut data = Vec::with_capacity(model.config.heads * l * l);
        for &a in &out.attn[p] {
            data.extend_from_slice(tape.value(a).data());
        }
        trace.layers.push(TraceLayer {
            p,
            x0: tape.value(out.virtual_rows[p]).data().to_vec(),
            attn: Tensor::new(vec![model.config.heads, l, l], data)?,
        });
    }
    Ok((tape.value(out.prediction).data().to_vec(), trace))
}

pub const TRACE_MAGIC: &[u8; 8] = b"STKDTRC1";
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace I/O: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt trace: {0}")]
    CorruptTrace(String),
    #[error("trace format {found:?} is not {expected:?}")]
    VersionMismatch { found: String, expected: String },
    #[error("molecule {key}: layer {p} attention row {row} of head {head} sums to {sum}")]
    NotRowStochastic { key: u64, p: usize, head: usize, row: usize, sum: f64 },
    #[error("molecule {key}: teacher has {teacher} tokens, student expects {student}")]
    LengthMismatch { key: u64, teacher: usize, student: usize },
    #[error("molecule {key}: no trace for teacher layer {p}")]
    MissingLayer { key: u64, p: usize },
    #[error("no trace for molecule {0}")]
    MissingMolecule(u64),
}

/// Trace file contents: dimensions from the header plus all records.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceSet {
    pub d_v: usize,
    pub heads: usize,
    pub traces: Vec<TeacherTrace>,
}

impl TraceSet {
    /// Rejects any molecule whose `l_G` differs from `expected(key) + 1`.
    pub fn check_lengths(&self, mut expected_n: impl FnMut(u64) -> Option<usize>) -> Result<(), TraceError> {
        for t in &self.traces {
            let n = expected_n(t.key).ok_or(TraceError::MissingMolecule(t.key))?;
            if t.n != n {
                return Err(TraceError::LengthMismatch { key: t.key, teacher: t.l_graph(), student: n + 1 });
            }
        }
        Ok(())
    }
}

/// Writes the header then each trace. The header carries `d_V` and `h'`
/// after the magic so records can be decoded without outside knowledge.
pub fn write_traces<W: Write>(w: &mut W, d_v: usize, heads: usize, traces: &[TeacherTrace]) -> Result<(), TraceError> {
    w.write_all(TRACE_MAGIC)?;
    w.write_all(&(d_v as u32).to_le_bytes())?;
    w.write_all(&(heads as u32).to_le_bytes())?;
    for t in traces {
        w.write_all(&t.key.to_le_bytes())?;
        w.write_all(&(t.n as u32).to_le_bytes())?;
        w.write_all(&(t.layers.len() as u32).to_le_bytes())?;
        for layer in &t.layers {
            let l = t.l_graph();
            if layer.x0.len() != d_v || layer.attn.shape() != [heads, l, l] {
                return Err(TraceError::CorruptTrace(format!("molecule {}: layer {} has the wrong shape", t.key, layer.p)));
            }
            w.write_all(&(layer.p as u32).to_le_bytes())?;
            for x in layer.x0.iter().chain(layer.attn.data()) {
                w.write_all(&x.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn export_trace(path: &Path, d_v: usize, heads: usize, traces: &[TeacherTrace]) -> Result<(), TraceError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_traces(&mut w, d_v, heads, traces)?;
    w.flush()?;
    Ok(())
}

/// Streaming reader over trace records; validates each as it is read.
pub struct TraceReader<R: Read> {
    inner: R,
    pub d_v: usize,
    pub heads: usize,
    done: bool,
}

impl<R: Read> TraceReader<R> {
    pub fn new(mut inner: R) -> Result<TraceReader<R>, TraceError> {
        let mut magic = [0u8; 8];
        read_exact(&mut inner, &mut magic)?;
        if &magic != TRACE_MAGIC {
            let found = String::from_utf8_lossy(&magic).into_owned();
            let expected = String::from_utf8_lossy(TRACE_MAGIC).into_owned();
            if magic[..7] == TRACE_MAGIC[..7] {
                return Err(TraceError::VersionMismatch { found, expected });
            }
            return Err(TraceError::CorruptTrace(format!("bad magic {found:?}")));
        }
        let d_v = read_u32(&mut inner)? as usize;
        let heads = read_u32(&mut inner)? as usize;
        Ok(TraceReader { inner, d_v, heads, done: false })
    }

    fn next_record(&mut self) -> Result<Option<TeacherTrace>, TraceError> {
        let mut key = [0u8; 8];
        let mut got = 0;
        while got < 8 {
            match self.inner.read(&mut key[got..]) {
                Ok(0) if got == 0 => return Ok(None),
                Ok(0) => return Err(TraceError::CorruptTrace("truncated record key".into())),
                Ok(k) => got += k,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        let key = u64::from_le_bytes(key);
        let n = read_u32(&mut self.inner)? as usize;
        let count = read_u32(&mut self.inner)? as usize;
        let l = n + 1;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let p = read_u32(&mut self.inner)? as usize;
            let x0 = read_f64s(&mut self.inner, self.d_v)?;
            let attn = Tensor::new(vec![self.heads, l, l], read_f64s(&mut self.inner, self.heads * l * l)?)
                .expect("length follows shape");
            check_row_stochastic(key, p, &attn)?;
            layers.push(TraceLayer { p, x0, attn });
        }
        Ok(Some(TeacherTrace { key, n, layers }))
    }
}

impl<R: Read> Iterator for TraceReader<R> {
    type Item = Result<TeacherTrace, TraceError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let r = self.next_record().transpose();
        if !matches!(r, Some(Ok(_))) {
            self.done = true;
        }
        r
    }
}

pub fn load_trace(path: &Path) -> Result<TraceSet, TraceError> {
    let reader = TraceReader::new(BufReader::new(File::open(path)?))?;
    let (d_v, heads) = (reader.d_v, reader.heads);
    let traces = reader.collect::<Result<Vec<_>, _>>()?;
    Ok(TraceSet { d_v, heads, traces })
}

fn check_row_stochastic(key: u64, p: usize, attn: &Tensor) -> Result<(), TraceError> {
    let l = attn.shape()[2];
    for (r, row) in attn.data().chunks(l.max(1)).enumerate() {
        let sum: f64 = row.iter().sum();
        let in_range = row.iter().all(|x| (0.0..=1.0 + ROW_SUM_TOLERANCE).contains(x));
        if !in_range || (sum - 1.0).abs() > ROW_SUM_TOLERANCE || !sum.is_finite() {
            return Err(TraceError::NotRowStochastic { key, p, head: r / l, row: r % l, sum });
        }
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), TraceError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => TraceError::CorruptTrace("truncated".into()),
        _ => TraceError::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, TraceError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>, TraceError> {
    let mut bytes = vec![0u8; n * 8];
    read_exact(r, &mut bytes)?;
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smiles::{featurize_graph, parse};

    fn traces() -> (TeacherModel, Vec<TeacherTrace>) {
        let model = TeacherModel::new(TeacherConfig { d_model: 8, heads: 2, d_k: 4, ffn: 16, layers: 2, ..Default::default() }, 5);
        let ts = ["C", "CCO", "c1ccccc1C.O"]
            .iter()
            .enumerate()
            .map(|(k, s)| teacher_forward(&model, &featurize_graph(&parse(s).unwrap()).unwrap(), k as u64, &[0, 1]).unwrap().1)
            .collect();
        (model, ts)
    }

    #[test]
    fn single_atom_shapes() {
        let (_, ts) = traces();
        let a = &ts[0].layers[1].attn;
        assert_eq!(a.shape(), &[2, 2, 2]);
        for row in a.data().chunks(2) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn round_trip_and_errors() {
        let (_, ts) = traces();
        let mut buf = Vec::new();
        write_traces(&mut buf, 8, 2, &ts).unwrap();
        let back: Vec<_> = TraceReader::new(buf.as_slice()).unwrap().collect::<Result<_, _>>().unwrap();
        assert_eq!(back, ts);

        let cut = &buf[..buf.len() - 5];
        let r: Result<Vec<_>, _> = TraceReader::new(cut).unwrap().collect();
        assert!(matches!(r, Err(TraceError::CorruptTrace(_))));

        let mut v2 = buf.clone();
        v2[7] = b'2';
        assert!(matches!(TraceReader::new(v2.as_slice()), Err(TraceError::VersionMismatch { .. })));

        let set = TraceSet { d_v: 8, heads: 2, traces: back };
        assert!(set.check_lengths(|k| Some([1, 3, 8][k as usize])).is_ok());
        let err = set.check_lengths(|k| Some([1, 4, 8][k as usize])).unwrap_err();
        assert!(matches!(err, TraceError::LengthMismatch { key: 1, teacher: 4, student: 5 }));
        assert!(matches!(set.traces[0].layer(7), Err(TraceError::MissingLayer { key: 0, p: 7 })));
    }

    #[test]
    fn rejects_non_stochastic_rows() {
        let (_, mut ts) = traces();
        ts[1].layers[0].attn.data_mut()[0] += 0.01;
        let mut buf = Vec::new();
        write_traces(&mut buf, 8, 2, &ts).unwrap();
        let r: Result<Vec<_>, _> = TraceReader::new(buf.as_slice()).unwrap().collect();
        assert!(matches!(r, Err(TraceError::NotRowStochastic { key: 1, p: 0, head: 0, row: 0, .. })));
    }

    #[test]
    fn checkpoint_round_trip() {
        let (model, _) = traces();
        let (back, _) = TeacherModel::from_checkpoint(model.to_checkpoint(serde_json::Value::Null)).unwrap();
        assert_eq!(back, model);
    }
}
