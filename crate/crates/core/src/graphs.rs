//! The logits graph over teachers and the representation graph over
//! pairwise-pooled teacher features, with learnable edge weights.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::metrics;
use crate::sketch::BilinearVertex;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Directed graph over teachers. Edge `n → m` carries the weight with which
/// teacher `n`'s imitation loss reaches receiving vertex `m`.
///
/// Parameters are stored receiver-major: `raw[m][n]` parameterizes
/// `e_{n→m}`, and effective weights are a softmax over each receiver's
/// incoming edges.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsGraph {
    n: usize,
    raw: Tensor,
    mask: Vec<bool>,
    temperatures: Vec<f64>,
}

impl LogitsGraph {
    /// Complete digraph without self-loops and zero raw parameters. A single
    /// teacher gets one self-loop so that the graph still carries its loss.
    pub fn new(n: usize, temperatures: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::Empty("LogitsGraph"));
        }
        let mask = (0..n * n).map(|k| n == 1 || k / n != k % n).collect();
        Self::with_mask(n, temperatures, mask)
    }

    /// `mask[m * n + k]` enables edge `k → m`.
    pub fn with_mask(n: usize, temperatures: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if temperatures.len() != n {
            return Err(Error::LengthMismatch {
                op: "LogitsGraph temperatures",
                expected: n,
                actual: temperatures.len(),
            });
        }
        if temperatures.iter().any(|&t| !(t > 0.0)) {
            return Err(invalid("temperatures must be positive"));
        }
        if mask.len() != n * n {
            return Err(Error::LengthMismatch {
                op: "LogitsGraph mask",
                expected: n * n,
                actual: mask.len(),
            });
        }
        if !mask.iter().any(|&b| b) {
            return Err(Error::Empty("LogitsGraph edges"));
        }
        Ok(LogitsGraph {
            n,
            raw: Tensor::zeros(&[n, n]),
            mask,
            temperatures,
        })
    }

    pub fn n_teachers(&self) -> usize {
        self.n
    }

    pub fn temperatures(&self) -> &[f64] {
        &self.temperatures
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn raw(&self) -> &Tensor {
        &self.raw
    }

    pub fn set_raw(&mut self, raw: Tensor) -> Result<()> {
        if raw.shape() != [self.n, self.n] {
            return Err(Error::ShapeMismatch {
                op: "LogitsGraph::set_raw",
                lhs: vec![self.n, self.n],
                rhs: raw.shape().to_vec(),
            });
        }
        self.raw = raw;
        Ok(())
    }

    /// Receivers with at least one incoming edge.
    pub fn n_receivers(&self) -> usize {
        (0..self.n)
            .filter(|&m| self.mask[m * self.n..(m + 1) * self.n].iter().any(|&b| b))
            .count()
    }

    /// Incoming weights `w[m][n] = e_{n→m}`; each receiving row sums to 1.
    pub fn incoming_weights(&self) -> Tensor {
        let mut t = Tape::new();
        let raw = t.constant(self.raw.clone());
        let w = t
            .masked_row_softmax(raw, &self.mask)
            .expect("shape checked at construction");
        t.value(w).clone()
    }

    /// Adjacency in sender-major layout, `G[m][n] = e_{m→n}`.
    pub fn adjacency(&self) -> Tensor {
        self.incoming_weights().transpose2().expect("square matrix")
    }
}

/// Per-sample imitation loss of the logits graph, recorded on `tape`.
///
/// `student_logits` is `[b, c]`, `teacher_logits[n]` is `[b, c]`, and `raw`
/// is the graph's `[n, n]` parameter leaf (trainable or constant). Each edge
/// `n → m` contributes `e_{n→m} · W₁(σ(f_n / T_n), σ(f_s))` with bins
/// `spacing` apart, and the double sum is averaged over receiving vertices.
/// Returns a `[b]` vector.
pub fn logits_graph_loss_on_tape(
    tape: &mut Tape,
    student_logits: Var,
    teacher_logits: &[Tensor],
    graph: &LogitsGraph,
    raw: Var,
    spacing: f64,
) -> Result<Var> {
    let n = graph.n_teachers();
    if teacher_logits.len() != n {
        return Err(Error::LengthMismatch {
            op: "logits_graph_loss",
            expected: n,
            actual: teacher_logits.len(),
        });
    }
    let s_shape = tape.shape(student_logits).to_vec();
    if s_shape.len() != 2 {
        return Err(invalid("student logits must be [batch, classes]"));
    }
    let b = s_shape[0];
    let eta = tape.softmax_last(student_logits, 1.0)?;
    let mut per_teacher = Vec::with_capacity(n);
    for (k, tl) in teacher_logits.iter().enumerate() {
        if tl.shape() != s_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "logits_graph_loss",
                lhs: s_shape.clone(),
                rhs: tl.shape().to_vec(),
            });
        }
        let mu = tl.softmax_last(graph.temperatures[k])?;
        let l = tape.em_rows(eta, mu.data(), spacing)?;
        per_teacher.push(tape.reshape(l, &[b, 1])?);
    }
    let losses = tape.concat_cols(&per_teacher)?;
    let w = tape.masked_row_softmax(raw, &graph.mask)?;
    let sender_mass = tape.sum_axis0(w)?;
    let sender_mass = tape.reshape(sender_mass, &[n, 1])?;
    let total = tape.matmul(losses, sender_mass)?;
    let total = tape.scale(total, 1.0 / graph.n_receivers() as f64)?;
    tape.reshape(total, &[b])
}

/// Single-sample logits-graph loss with the graph's current weights.
pub fn logits_graph_loss(
    student_logits: &[f64],
    teacher_logits: &[&[f64]],
    graph: &LogitsGraph,
    spacing: f64,
) -> Result<f64> {
    let c = student_logits.len();
    if c == 0 {
        return Err(Error::Empty("student logits"));
    }
    let mut teachers = Vec::with_capacity(teacher_logits.len());
    for tl in teacher_logits {
        if tl.len() != c {
            return Err(Error::LengthMismatch {
                op: "logits_graph_loss",
                expected: c,
                actual: tl.len(),
            });
        }
        teachers.push(Tensor::new(vec![1, c], tl.to_vec())?);
    }
    let mut t = Tape::new();
    let s = t.constant(Tensor::new(vec![1, c], student_logits.to_vec())?);
    let raw = t.constant(graph.raw.clone());
    let l = logits_graph_loss_on_tape(&mut t, s, &teachers, graph, raw, spacing)?;
    Ok(t.scalar(l))
}

/// Graph over bilinear vertices. Each vertex carries `b` raw edge
/// parameters (one row per edge dimension); effective vertex weights are
/// the per-row softmax of `raw / T` averaged over rows. With `b = 1` this is
/// a single scalar weight per vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct ReprGraph {
    n_vertices: usize,
    raw: Tensor,
    temperatures: Vec<f64>,
}

impl ReprGraph {
    pub fn new(n_teachers: usize, temperatures: Vec<f64>, edge_dims: usize) -> Result<Self> {
        if n_teachers < 2 {
            return Err(invalid("representation graph needs at least two teachers"));
        }
        let k = n_teachers * (n_teachers - 1) / 2;
        if temperatures.len() != k {
            return Err(Error::LengthMismatch {
                op: "ReprGraph temperatures",
                expected: k,
                actual: temperatures.len(),
            });
        }
        if temperatures.iter().any(|&t| !(t > 0.0)) {
            return Err(invalid("temperatures must be positive"));
        }
        if edge_dims == 0 {
            return Err(invalid("edge dimension must be positive"));
        }
        Ok(ReprGraph {
            n_vertices: k,
            raw: Tensor::zeros(&[edge_dims, k]),
            temperatures,
        })
    }

    pub fn n_vertices(&self) -> usize {
        self.n_vertices
    }

    pub fn edge_dims(&self) -> usize {
        self.raw.shape()[0]
    }

    pub fn temperatures(&self) -> &[f64] {
        &self.temperatures
    }

    pub fn raw(&self) -> &Tensor {
        &self.raw
    }

    pub fn set_raw(&mut self, raw: Tensor) -> Result<()> {
        if raw.shape() != self.raw.shape() {
            return Err(Error::ShapeMismatch {
                op: "ReprGraph::set_raw",
                lhs: self.raw.shape().to_vec(),
                rhs: raw.shape().to_vec(),
            });
        }
        self.raw = raw;
        Ok(())
    }

    fn inv_temperature_tensor(&self) -> Tensor {
        let b = self.edge_dims();
        let mut d = Vec::with_capacity(b * self.n_vertices);
        for _ in 0..b {
            d.extend(self.temperatures.iter().map(|t| 1.0 / t));
        }
        Tensor::new(vec![b, self.n_vertices], d).expect("consistent shape")
    }

    /// Vertex weights on the tape, shape `[k]`.
    pub fn weights_on_tape(&self, tape: &mut Tape, raw: Var) -> Result<Var> {
        let inv_t = tape.constant(self.inv_temperature_tensor());
        let scaled = tape.mul(raw, inv_t)?;
        let w = tape.softmax_last(scaled, 1.0)?;
        let w = tape.sum_axis0(w)?;
        tape.scale(w, 1.0 / self.edge_dims() as f64)
    }

    /// Current vertex weights; they sum to one.
    pub fn weights(&self) -> Vec<f64> {
        let mut t = Tape::new();
        let raw = t.constant(self.raw.clone());
        let w = self.weights_on_tape(&mut t, raw).expect("shapes checked at construction");
        t.value(w).data().to_vec()
    }
}

/// Softened vertex channels: each vertex is cut into `ck` channels of the
/// student's spatial size `s`, and every channel goes through `σ(· / T_k)`
/// so that it sums to one like a student channel. Output `[b, k, ck, s]`.
pub fn soften_vertices(vertices: &[Vec<BilinearVertex>], graph: &ReprGraph, spatial: usize) -> Result<Tensor> {
    let first = vertices.first().ok_or(Error::Empty("vertices"))?;
    let k = graph.n_vertices();
    let e = first.first().map_or(0, |v| v.vector.len());
    let mut data = Vec::with_capacity(vertices.len() * k * e);
    for per_sample in vertices {
        if per_sample.len() != k {
            return Err(Error::LengthMismatch {
                op: "soften_vertices",
                expected: k,
                actual: per_sample.len(),
            });
        }
        for v in per_sample {
            if v.vector.len() != e {
                return Err(Error::LengthMismatch {
                    op: "soften_vertices",
                    expected: e,
                    actual: v.vector.len(),
                });
            }
            data.extend_from_slice(&v.vector);
        }
    }
    soften_vertex_tensor(&Tensor::new(vec![vertices.len(), k, e.max(1)], data)?, graph, spatial)
}

/// Same as [`soften_vertices`] for raw vertex vectors stacked as `[b, k, e]`.
pub fn soften_vertex_tensor(raw: &Tensor, graph: &ReprGraph, spatial: usize) -> Result<Tensor> {
    let s = raw.shape();
    if s.len() != 3 || s[1] != graph.n_vertices() {
        return Err(Error::ShapeMismatch {
            op: "soften_vertex_tensor",
            lhs: vec![0, graph.n_vertices(), 0],
            rhs: s.to_vec(),
        });
    }
    let (b, k, e) = (s[0], s[1], s[2]);
    if spatial == 0 || e % spatial != 0 {
        return Err(invalid(format!(
            "vertex length {e} is not divisible by the student spatial size {spatial}"
        )));
    }
    let mut data = raw.data().to_vec();
    for (i, v) in data.chunks_mut(e).enumerate() {
        for channel in v.chunks_mut(spatial) {
            crate::tensor::softmax_in_place(channel, graph.temperatures[i % k]);
        }
    }
    Tensor::new(vec![b, k, e / spatial, spatial], data)
}

/// Gaussian kernel bandwidth selection for the representation loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    Fixed(f64),
    /// Median heuristic over at most this many channel vectors of the
    /// current batch, taken at a fixed stride.
    Median(usize),
}

/// Median-heuristic bandwidth over a strided subsample of the student
/// channel vectors `x` (`[b, cs, s]`) and softened vertex channels `y`
/// (`[b, k, ck, s]`).
pub fn batch_bandwidth(x: &Tensor, y: &Tensor, max_vectors: usize) -> Result<f64> {
    let s = *x.shape().last().expect("shape");
    let nx = x.len() / s;
    let ny = y.len() / s;
    let total = nx + ny;
    let stride = total.div_ceil(max_vectors.max(2));
    let vecs: Vec<&[f64]> = (0..total)
        .step_by(stride)
        .map(|i| {
            if i < nx {
                &x.data()[i * s..(i + 1) * s]
            } else {
                &y.data()[(i - nx) * s..(i - nx + 1) * s]
            }
        })
        .collect();
    metrics::median_heuristic_bandwidth(&vecs)
}

/// Per-sample representation-graph loss, recorded on `tape`.
///
/// `student_tap` is `[b, cs, h, w]`; its channels are softmaxed over the
/// spatial axis before the MMD. `softened` comes from [`soften_vertices`].
/// Returns a `[b]` vector `Σ_k w_k · MMD(σ(R_s), D_k)` and the bandwidth
/// used, which is held fixed for the whole batch.
pub fn repr_graph_loss_on_tape(
    tape: &mut Tape,
    student_tap: Var,
    softened: Tensor,
    graph: &ReprGraph,
    raw: Var,
    bandwidth: Bandwidth,
) -> Result<(Var, f64)> {
    let ts = tape.shape(student_tap).to_vec();
    if ts.len() != 4 {
        return Err(invalid("student tap must be [batch, channels, h, w]"));
    }
    let (b, cs, s) = (ts[0], ts[1], ts[2] * ts[3]);
    let ss = softened.shape();
    if ss.len() != 4 || ss[0] != b || ss[3] != s || ss[1] != graph.n_vertices() {
        return Err(Error::ShapeMismatch {
            op: "repr_graph_loss",
            lhs: ts,
            rhs: ss.to_vec(),
        });
    }
    let x = tape.reshape(student_tap, &[b, cs, s])?;
    let x = tape.softmax_last(x, 1.0)?;
    let bw = match bandwidth {
        Bandwidth::Fixed(v) => v,
        Bandwidth::Median(max) => batch_bandwidth(tape.value(x), &softened, max)?,
    };
    let mmd = tape.mmd(x, softened, bw)?;
    let w = graph.weights_on_tape(tape, raw)?;
    let w = tape.reshape(w, &[graph.n_vertices(), 1])?;
    let total = tape.matmul(mmd, w)?;
    Ok((tape.reshape(total, &[b])?, bw))
}

/// Single-sample representation-graph loss with the graph's current weights.
pub fn repr_graph_loss(
    student_feature: &Tensor,
    vertices: &[BilinearVertex],
    graph: &ReprGraph,
    bandwidth: f64,
) -> Result<f64> {
    let s = student_feature.shape();
    if s.len() != 3 {
        return Err(invalid("student feature must be [channels, h, w]"));
    }
    let softened = soften_vertices(&[vertices.to_vec()], graph, s[1] * s[2])?;
    let mut t = Tape::new();
    let x = t.constant(student_feature.clone().reshape(&[1, s[0], s[1], s[2]])?);
    let raw = t.constant(graph.raw.clone());
    let (l, _) = repr_graph_loss_on_tape(&mut t, x, softened, graph, raw, Bandwidth::Fixed(bandwidth))?;
    Ok(t.scalar(l))
}

/// Effective edge weights, one row per receiving vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTable {
    pub name: String,
    pub rows: Vec<Vec<f64>>,
}

pub trait EdgeWeights {
    fn weight_table(&self) -> WeightTable;
}

impl EdgeWeights for LogitsGraph {
    fn weight_table(&self) -> WeightTable {
        let w = self.incoming_weights();
        WeightTable {
            name: "logits".into(),
            rows: (0..self.n).map(|m| w.row(m).to_vec()).collect(),
        }
    }
}

impl EdgeWeights for ReprGraph {
    fn weight_table(&self) -> WeightTable {
        WeightTable {
            name: "repr".into(),
            rows: vec![self.weights()],
        }
    }
}

pub fn edge_weight_report<G: EdgeWeights>(g: &G) -> WeightTable {
    g.weight_table()
}
