//! A small trainable conditional velocity network.
//!
//! The input is the concatenation `[x_t, t, x_orig, one_hot(instruction)]`,
//! followed by two `tanh` layers of width 128. The output layer adds a
//! residual to a fixed keep term:
//!
//! ```text
//! v = (x_t - x_orig) / max(t, MIN_TIME) + W3·h2 + b3
//! ```
//!
//! A zero output layer therefore gives the keep velocity, not the zero
//! field. `W3` and `b3` start at zero.
//!
//! Parameters live in one flat vector in the order `W1, b1, W2, b2, W3, b3`,
//! with weight matrices stored row-major as `(out, in)`. Training is plain
//! SGD on the flow-matching loss.

use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::analytic::EditTask;
use crate::error::{Error, Result};
use crate::flow::{
    conditional_velocity, interpolate, noise_rng, standard_normal_from, Condition, FlowSample,
    VelocityModel,
};
use crate::grid::{LatentGrid, Shape};

/// Width of both hidden layers.
pub const HIDDEN: usize = 128;

/// Floor on the time used to scale the output, so the field stays bounded
/// near the data end.
pub const MIN_TIME: f64 = 0.05;

const MAGIC: &[u8; 4] = b"VFM1";

/// Names of the parameter blocks, in storage order.
pub const BLOCKS: [&str; 6] = ["W1", "b1", "W2", "b2", "W3", "b3"];

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    blocks: [Range<usize>; 6],
}

impl Layout {
    fn new(shape: Shape, vocab: usize, h1: usize, h2: usize) -> Self {
        let d = shape.len();
        let input = 2 * d + 1 + vocab;
        let sizes = [input * h1, h1, h1 * h2, h2, h2 * d, d];
        let mut start = 0;
        let blocks = sizes.map(|n| {
            let r = start..start + n;
            start += n;
            r
        });
        Self { blocks }
    }

    fn total(&self) -> usize {
        self.blocks[5].end
    }
}

/// Number of parameters of a network for the given grid, vocabulary and
/// hidden widths.
pub fn param_count(shape: Shape, vocab: usize, h1: usize, h2: usize) -> usize {
    Layout::new(shape, vocab, h1, h2).total()
}

/// The network. Immutable once built; cloning is cheap enough for tests.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyVelocityNet {
    shape: Shape,
    vocab: usize,
    hidden: (usize, usize),
    layout: Layout,
    params: Vec<f64>,
}

/// One training pair: a flow sample whose data end is the conditioned target,
/// together with the conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub sample: FlowSample,
    pub source: LatentGrid,
    pub instruction: u8,
}

/// Evaluated inputs of a batch in matrix form.
struct Batch {
    input: Array2<f64>,
    x_t: Array2<f64>,
    source: Array2<f64>,
    inv_time: Array1<f64>,
}

struct Activations {
    h1: Array2<f64>,
    h2: Array2<f64>,
    v: Array2<f64>,
}

impl ToyVelocityNet {
    /// A freshly initialized 2x128 network. Hidden weights are drawn from
    /// `N(0, 1/fan_in)`; `W3` and all biases start at zero, so a fresh
    /// network is the keep velocity.
    pub fn new(shape: Shape, vocab: usize, seed: u64) -> Result<Self> {
        Self::with_hidden(shape, vocab, HIDDEN, HIDDEN, seed)
    }

    /// As [`ToyVelocityNet::new`] with custom hidden widths.
    pub fn with_hidden(shape: Shape, vocab: usize, h1: usize, h2: usize, seed: u64) -> Result<Self> {
        shape.ensure_nondegenerate()?;
        if vocab == 0 || vocab > 256 {
            return Err(Error::InvalidConfig {
                field: "vocab",
                reason: format!("must be in 1..=256, got {vocab}"),
            });
        }
        if h1 == 0 || h2 == 0 {
            return Err(Error::InvalidConfig {
                field: "hidden",
                reason: "hidden widths must be positive".into(),
            });
        }
        let layout = Layout::new(shape, vocab, h1, h2);
        let mut params = vec![0.0; layout.total()];
        let mut rng = noise_rng(seed);
        let input = 2 * shape.len() + 1 + vocab;
        for (block, fan_in) in [(0, input), (2, h1)] {
            let std = (1.0 / fan_in as f64).sqrt();
            for p in &mut params[layout.blocks[block].clone()] {
                *p = std * Distribution::<f64>::sample(&StandardNormal, &mut rng);
            }
        }
        Ok(Self {
            shape,
            vocab,
            hidden: (h1, h2),
            layout,
            params,
        })
    }

    /// Replaces every parameter. The length must match [`Self::params`].
    pub fn with_params(mut self, params: Vec<f64>) -> Result<Self> {
        if params.len() != self.params.len() {
            return Err(Error::InvalidConfig {
                field: "params",
                reason: format!("expected {} values, got {}", self.params.len(), params.len()),
            });
        }
        if let Some(index) = params.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFiniteValue { index });
        }
        self.params = params;
        Ok(self)
    }

    /// Sets `W3` and `b3` to zero, leaving only the keep velocity.
    pub fn zero_output_layer(&mut self) {
        let start = self.layout.blocks[4].start;
        self.params[start..].fill(0.0);
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn hidden(&self) -> (usize, usize) {
        self.hidden
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Index range of each parameter block, named as in [`BLOCKS`].
    pub fn blocks(&self) -> impl Iterator<Item = (&'static str, Range<usize>)> + '_ {
        BLOCKS.iter().copied().zip(self.layout.blocks.iter().cloned())
    }

    fn block(&self, i: usize) -> &[f64] {
        &self.params[self.layout.blocks[i].clone()]
    }

    fn matrix(&self, i: usize, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((rows, cols), self.block(i)).expect("layout sizes")
    }

    fn vector(&self, i: usize) -> ArrayView1<'_, f64> {
        ArrayView1::from(self.block(i))
    }

    fn input_len(&self) -> usize {
        2 * self.shape.len() + 1 + self.vocab
    }

    fn check_inputs(&self, x_t: &LatentGrid, t: f64, source: &LatentGrid, code: u8) -> Result<()> {
        for grid in [x_t, source] {
            if grid.shape() != self.shape {
                return Err(Error::ShapeMismatch {
                    expected: self.shape,
                    found: grid.shape(),
                });
            }
        }
        if usize::from(code) >= self.vocab {
            return Err(Error::UnknownInstruction {
                code,
                vocab: self.vocab,
            });
        }
        if !t.is_finite() {
            return Err(Error::TimeOutOfRange { t, range: "[0, 1]" });
        }
        Ok(())
    }

    fn batch<'a>(
        &self,
        rows: impl ExactSizeIterator<Item = (&'a LatentGrid, f64, &'a LatentGrid, u8)>,
    ) -> Result<Batch> {
        let n = rows.len();
        let d = self.shape.len();
        let mut input = Array2::zeros((n, self.input_len()));
        let mut x_t = Array2::zeros((n, d));
        let mut source = Array2::zeros((n, d));
        let mut inv_time = Array1::zeros(n);
        for (b, (xt, t, src, code)) in rows.enumerate() {
            self.check_inputs(xt, t, src, code)?;
            let xt_view = ArrayView1::from(xt.as_slice());
            let src_view = ArrayView1::from(src.as_slice());
            let mut row = input.row_mut(b);
            row.slice_mut(s![..d]).assign(&xt_view);
            row[d] = t;
            row.slice_mut(s![d + 1..2 * d + 1]).assign(&src_view);
            row[2 * d + 1 + usize::from(code)] = 1.0;
            x_t.row_mut(b).assign(&xt_view);
            source.row_mut(b).assign(&src_view);
            inv_time[b] = 1.0 / t.max(MIN_TIME);
        }
        Ok(Batch {
            input,
            x_t,
            source,
            inv_time,
        })
    }

    fn activations(&self, batch: &Batch) -> Activations {
        let (h1, h2) = self.hidden;
        let d = self.shape.len();
        let w1 = self.matrix(0, h1, self.input_len());
        let w2 = self.matrix(2, h2, h1);
        let w3 = self.matrix(4, d, h2);
        let a1 = (batch.input.dot(&w1.t()) + self.vector(1)).mapv(f64::tanh);
        let a2 = (a1.dot(&w2.t()) + self.vector(3)).mapv(f64::tanh);
        let mut v = &batch.x_t - &batch.source;
        v *= &batch.inv_time.view().insert_axis(Axis(1));
        v += &(a2.dot(&w3.t()) + self.vector(5));
        Activations { h1: a1, h2: a2, v }
    }

    /// Predicted velocity at `x_t`, time `t`, for the given source and
    /// instruction code.
    pub fn forward(&self, x_t: &LatentGrid, t: f64, x_orig: &LatentGrid, instruction: u8) -> Result<LatentGrid> {
        let batch = self.batch(std::iter::once((x_t, t, x_orig, instruction)))?;
        let v = self.activations(&batch).v;
        LatentGrid::new(self.shape, v.into_raw_vec_and_offset().0)
    }

    /// Flow-matching loss and its exact gradient with respect to every
    /// parameter, over examples that may carry different conditions.
    pub fn loss_and_gradient(&self, examples: &[TrainingExample]) -> Result<(f64, Vec<f64>)> {
        if examples.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let x_ts = examples
            .iter()
            .map(|e| interpolate(&e.sample))
            .collect::<Result<Vec<_>>>()?;
        let batch = self.batch(
            examples
                .iter()
                .zip(&x_ts)
                .map(|(e, xt)| (xt, e.sample.t, &e.source, e.instruction)),
        )?;
        let d = self.shape.len();
        let mut targets = Array2::zeros((examples.len(), d));
        for (b, e) in examples.iter().enumerate() {
            let y = conditional_velocity(&e.sample)?;
            targets.row_mut(b).assign(&ArrayView1::from(y.as_slice()));
        }
        Ok(self.loss_and_gradient_raw(&batch, &targets))
    }

    fn loss_and_gradient_raw(&self, batch: &Batch, targets: &Array2<f64>) -> (f64, Vec<f64>) {
        let (h1, h2) = self.hidden;
        let d = self.shape.len();
        let n = batch.input.nrows() as f64;
        let act = self.activations(batch);
        let residual = &act.v - targets;
        let loss = residual.iter().map(|r| r * r).sum::<f64>() / n;

        let g_out = residual * (2.0 / n);

        let w2 = self.matrix(2, h2, h1);
        let w3 = self.matrix(4, d, h2);
        let mut grad = vec![0.0; self.params.len()];
        let mut put = |i: usize, values: &[f64]| {
            grad[self.layout.blocks[i].clone()].copy_from_slice(values);
        };

        let g_z2 = g_out.dot(&w3) * act.h2.mapv(|h| 1.0 - h * h);
        let g_z1 = g_z2.dot(&w2) * act.h1.mapv(|h| 1.0 - h * h);

        let dense = |g: &Array2<f64>, x: &Array2<f64>| g.t().dot(x).as_standard_layout().to_owned();
        put(0, dense(&g_z1, &batch.input).as_slice().unwrap());
        put(1, g_z1.sum_axis(Axis(0)).as_slice().unwrap());
        put(2, dense(&g_z2, &act.h1).as_slice().unwrap());
        put(3, g_z2.sum_axis(Axis(0)).as_slice().unwrap());
        put(4, dense(&g_out, &act.h2).as_slice().unwrap());
        put(5, g_out.sum_axis(Axis(0)).as_slice().unwrap());
        (loss, grad)
    }

    /// Mean flow-matching loss over `examples`.
    pub fn loss(&self, examples: &[TrainingExample]) -> Result<f64> {
        Ok(self.loss_and_gradient(examples)?.0)
    }

    /// Serializes to the `VFM1` format: magic, six little-endian `u32`
    /// header fields (channels, height, width, vocab, hidden1, hidden2),
    /// then every parameter as a little-endian `f32`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 24 + 4 * self.params.len());
        out.extend_from_slice(MAGIC);
        let header = [
            self.shape.channels,
            self.shape.height,
            self.shape.width,
            self.vocab,
            self.hidden.0,
            self.hidden.1,
        ];
        for field in header {
            out.extend_from_slice(&(field as u32).to_le_bytes());
        }
        for &p in &self.params {
            out.extend_from_slice(&(p as f32).to_le_bytes());
        }
        out
    }

    /// Parses the format written by [`Self::to_bytes`].
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::ModelFormat("bad magic bytes, expected VFM1".into()));
        }
        if bytes.len() < 28 {
            return Err(Error::ModelFormat(format!(
                "truncated header: {} of 28 bytes",
                bytes.len()
            )));
        }
        let field = |i: usize| {
            let at = 4 + 4 * i;
            u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize
        };
        let shape = Shape::new(field(0), field(1), field(2));
        let (vocab, h1, h2) = (field(3), field(4), field(5));
        let mut net = Self::with_hidden(shape, vocab, h1, h2, 0)
            .map_err(|e| Error::ModelFormat(format!("invalid header: {e}")))?;
        let body = &bytes[28..];
        let expected = 4 * net.params.len();
        if body.len() < expected {
            return Err(Error::ModelFormat(format!(
                "truncated parameters: header declares {} values ({expected} bytes), found {} bytes",
                net.params.len(),
                body.len()
            )));
        }
        if body.len() > expected {
            return Err(Error::ModelFormat(format!(
                "{} trailing bytes after the parameters declared by the header",
                body.len() - expected
            )));
        }
        for (p, chunk) in net.params.iter_mut().zip(body.chunks_exact(4)) {
            *p = f64::from(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        Ok(net)
    }
}

impl VelocityModel for ToyVelocityNet {
    fn velocity(&self, x_t: &LatentGrid, t: f64, condition: &Condition) -> Result<LatentGrid> {
        self.forward(x_t, t, &condition.source, condition.instruction)
    }
}

/// Exact gradient of [`crate::fm_loss`] for `net` over `batch` under one
/// `condition`.
pub fn backward(net: &ToyVelocityNet, batch: &[FlowSample], condition: &Condition) -> Result<Vec<f64>> {
    let examples: Vec<TrainingExample> = batch
        .iter()
        .map(|sample| TrainingExample {
            sample: sample.clone(),
            source: condition.source.clone(),
            instruction: condition.instruction,
        })
        .collect();
    Ok(net.loss_and_gradient(&examples)?.1)
}

/// SGD settings. Nothing has a default.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Probability that a drawn pair is trained under the null instruction
    /// with `x0 = x_orig`.
    pub null_fraction: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field, reason: &str| {
            Err(Error::InvalidConfig {
                field,
                reason: reason.into(),
            })
        };
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if self.iterations == 0 {
            return bad("iterations", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.null_fraction) {
            return bad("null_fraction", "must lie in [0, 1]");
        }
        Ok(())
    }
}

/// A trained network and the minibatch loss before each update.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: ToyVelocityNet,
    pub losses: Vec<f64>,
}

/// Draws one training pair from `tasks`: the task's target under its own
/// instruction, or `x_orig` under the null instruction.
pub fn draw_example(tasks: &[EditTask], null_fraction: f64, rng: &mut ChaCha20Rng) -> TrainingExample {
    let task = &tasks[rng.random_range(0..tasks.len())];
    let null = rng.random::<f64>() < null_fraction;
    let (x0, instruction) = if null {
        (task.x_orig.clone(), 0)
    } else {
        (task.x_edit.clone(), task.instruction.code())
    };
    let mut t = 0.0;
    while t == 0.0 {
        t = rng.random::<f64>();
    }
    let x1 = standard_normal_from(x0.shape(), rng);
    TrainingExample {
        sample: FlowSample { x0, x1, t },
        source: task.x_orig.clone(),
        instruction,
    }
}

/// Trains `net` on fresh pairs drawn from `tasks` with momentum-free SGD.
/// Deterministic for a given network and config.
pub fn train(net: ToyVelocityNet, tasks: &[EditTask], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if tasks.is_empty() {
        return Err(Error::InvalidConfig {
            field: "tasks",
            reason: "need at least one task".into(),
        });
    }
    let mut rng = noise_rng(config.seed);
    let mut net = net;
    let mut losses = Vec::with_capacity(config.iterations);
    for iteration in 0..config.iterations {
        let batch: Vec<TrainingExample> = (0..config.batch_size)
            .map(|_| draw_example(tasks, config.null_fraction, &mut rng))
            .collect();
        let (loss, grad) = net.loss_and_gradient(&batch)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration, loss });
        }
        losses.push(loss);
        for (p, g) in net.params.iter_mut().zip(&grad) {
            *p -= config.learning_rate * g;
        }
    }
    if let Some(index) = net.params.iter().position(|p| !p.is_finite()) {
        return Err(Error::Diverged {
            iteration: config.iterations,
            loss: net.params[index],
        });
    }
    Ok(TrainOutcome { net, losses })
}

/// Runs `iterations` full-batch SGD steps on a fixed set of examples.
pub fn fit_examples(
    net: ToyVelocityNet,
    examples: &[TrainingExample],
    learning_rate: f64,
    iterations: usize,
) -> Result<TrainOutcome> {
    let mut net = net;
    let mut losses = Vec::with_capacity(iterations);
    for iteration in 0..iterations {
        let (loss, grad) = net.loss_and_gradient(examples)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration, loss });
        }
        losses.push(loss);
        for (p, g) in net.params.iter_mut().zip(&grad) {
            *p -= learning_rate * g;
        }
    }
    Ok(TrainOutcome { net, losses })
}

/// Classifier-free guidance: `v_null + scale·(v_cond - v_null)`, with
/// `v_null` evaluated under instruction `0`.
pub fn cfg_velocity(
    net: &ToyVelocityNet,
    x_t: &LatentGrid,
    t: f64,
    x_orig: &LatentGrid,
    instruction: u8,
    scale: f64,
) -> Result<LatentGrid> {
    let v_cond = net.forward(x_t, t, x_orig, instruction)?;
    let v_null = net.forward(x_t, t, x_orig, 0)?;
    combine_guidance(&v_null, &v_cond, scale)
}

/// `v_null + scale·(v_cond - v_null)`.
pub fn combine_guidance(v_null: &LatentGrid, v_cond: &LatentGrid, scale: f64) -> Result<LatentGrid> {
    if scale == 1.0 {
        v_null.ensure_same_shape(v_cond)?;
        return Ok(v_cond.clone());
    }
    if scale == 0.0 {
        v_null.ensure_same_shape(v_cond)?;
        return Ok(v_null.clone());
    }
    v_null.lincomb(1.0 - scale, v_cond, scale)
}

/// Any velocity model under classifier-free guidance at a fixed scale.
#[derive(Debug, Clone, Copy)]
pub struct CfgModel<M> {
    pub model: M,
    pub scale: f64,
}

impl<M: VelocityModel> VelocityModel for CfgModel<M> {
    fn velocity(&self, x_t: &LatentGrid, t: f64, condition: &Condition) -> Result<LatentGrid> {
        let v_cond = self.model.velocity(x_t, t, condition)?;
        if self.scale == 1.0 {
            return Ok(v_cond);
        }
        let v_null = self.model.velocity(x_t, t, &condition.null())?;
        combine_guidance(&v_null, &v_cond, self.scale)
    }
}

pub fn save_model(net: &ToyVelocityNet, path: impl AsRef<Path>) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(&net.to_bytes())?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ToyVelocityNet> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    ToyVelocityNet::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::make_task_suite;
    use crate::flow::{fm_loss, standard_normal};

    fn small_net(seed: u64) -> ToyVelocityNet {
        let mut net = ToyVelocityNet::with_hidden(Shape::new(1, 3, 3), 4, 7, 5, seed).unwrap();
        // random output layer so that every block receives gradient
        let mut rng = noise_rng(seed + 100);
        let start = net.layout.blocks[4].start;
        for p in &mut net.params[start..] {
            *p = 0.3 * Distribution::<f64>::sample(&StandardNormal, &mut rng);
        }
        for i in [1, 3] {
            for p in &mut net.params[net.layout.blocks[i].clone()] {
                *p = 0.1 * Distribution::<f64>::sample(&StandardNormal, &mut rng);
            }
        }
        net
    }

    fn examples(net: &ToyVelocityNet, n: usize, seed: u64) -> Vec<TrainingExample> {
        let mut rng = noise_rng(seed);
        (0..n)
            .map(|i| {
                let shape = net.shape();
                TrainingExample {
                    sample: FlowSample::new(
                        standard_normal_from(shape, &mut rng).scale(0.3),
                        standard_normal_from(shape, &mut rng),
                        0.1 + 0.8 * rng.random::<f64>(),
                    )
                    .unwrap(),
                    source: standard_normal_from(shape, &mut rng).scale(0.3),
                    instruction: (i % net.vocab()) as u8,
                }
            })
            .collect()
    }

    #[test]
    fn parameter_count_is_a_function_of_shape_and_vocab() {
        let shape = Shape::new(1, 16, 16);
        let d = 256;
        let expected = (2 * d + 1 + 6) * 128 + 128 + 128 * 128 + 128 + 128 * d + d;
        assert_eq!(param_count(shape, 6, HIDDEN, HIDDEN), expected);
        for seed in [0, 1] {
            assert_eq!(ToyVelocityNet::new(shape, 6, seed).unwrap().params().len(), expected);
        }
    }

    #[test]
    fn forward_contract() {
        let shape = Shape::new(1, 16, 16);
        let net = ToyVelocityNet::new(shape, 6, 3).unwrap();
        let x = standard_normal(shape, 1);
        let src = standard_normal(shape, 2);
        let v = net.forward(&x, 0.5, &src, 2).unwrap();
        assert_eq!(v.shape(), shape);
        assert_eq!(v, net.forward(&x, 0.5, &src, 2).unwrap());

        // a fresh network is the keep velocity
        let keep = x.sub(&src).unwrap().scale(2.0);
        assert!(v.max_abs_diff(&keep).unwrap() < 1e-12);

        let mut zeroed = small_net(4);
        zeroed.zero_output_layer();
        let (xs, ss) = (standard_normal(zeroed.shape(), 5), standard_normal(zeroed.shape(), 6));
        let keep = xs.sub(&ss).unwrap().scale(1.0 / 0.7);
        assert!(zeroed.forward(&xs, 0.7, &ss, 3).unwrap().max_abs_diff(&keep).unwrap() < 1e-12);

        assert_eq!(
            net.forward(&x, 0.5, &src, 6),
            Err(Error::UnknownInstruction { code: 6, vocab: 6 })
        );
        let small = LatentGrid::zeros(Shape::new(1, 4, 4));
        assert!(matches!(
            net.forward(&small, 0.5, &src, 0),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn gradient_matches_finite_differences_on_every_block() {
        let net = small_net(11);
        let batch = examples(&net, 5, 12);
        let (_, grad) = net.loss_and_gradient(&batch).unwrap();
        let mut rng = noise_rng(13);
        let h = 1e-5;
        for (name, range) in net.blocks() {
            for _ in 0..8 {
                let i = rng.random_range(range.clone());
                let mut plus = net.params().to_vec();
                plus[i] += h;
                let mut minus = net.params().to_vec();
                minus[i] -= h;
                let lp = net.clone().with_params(plus).unwrap().loss(&batch).unwrap();
                let lm = net.clone().with_params(minus).unwrap().loss(&batch).unwrap();
                let fd = (lp - lm) / (2.0 * h);
                let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
                assert!(rel < 1e-4, "{name}[{i}]: analytic {} vs fd {fd}", grad[i]);
            }
        }
    }

    #[test]
    fn backward_matches_fm_loss() {
        let net = small_net(21);
        let cond = Condition::new(standard_normal(net.shape(), 1).scale(0.2), 3);
        let batch: Vec<FlowSample> = examples(&net, 4, 22).into_iter().map(|e| e.sample).collect();
        let grad = backward(&net, &batch, &cond).unwrap();
        let i = net.layout.blocks[2].start + 3;
        let h = 1e-5;
        let mut plus = net.params().to_vec();
        plus[i] += h;
        let mut minus = net.params().to_vec();
        minus[i] -= h;
        let lp = fm_loss(&net.clone().with_params(plus).unwrap(), &batch, &cond).unwrap();
        let lm = fm_loss(&net.clone().with_params(minus).unwrap(), &batch, &cond).unwrap();
        assert!(((lp - lm) / (2.0 * h) - grad[i]).abs() < 1e-4 * grad[i].abs().max(1e-6));
        assert_eq!(backward(&net, &[], &cond), Err(Error::EmptyBatch));
    }

    #[test]
    fn gradient_vanishes_for_a_perfect_fit() {
        // a zero-noise example of a fresh network: x1 = x0 = source gives
        // target 0 and prediction (x_t - source)/t = 0
        let net = ToyVelocityNet::with_hidden(Shape::new(1, 2, 2), 3, 4, 4, 0).unwrap();
        let src = standard_normal(net.shape(), 5);
        let example = TrainingExample {
            sample: FlowSample::new(src.clone(), src.clone(), 0.4).unwrap(),
            source: src,
            instruction: 1,
        };
        let (loss, grad) = net.loss_and_gradient(&[example]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn doubling_residuals_doubles_gradient_of_zero_output_net() {
        // with W3 = 0 the prediction is affine in the output layer, so the
        // gradient is linear in the residual
        let mut net = small_net(31);
        net.zero_output_layer();
        let batch = net
            .batch(
                examples(&net, 3, 32)
                    .iter()
                    .map(|e| (&e.sample.x1, e.sample.t, &e.source, e.instruction))
                    .collect::<Vec<_>>()
                    .into_iter(),
            )
            .unwrap();
        let keep = (&batch.x_t - &batch.source) * batch.inv_time.view().insert_axis(Axis(1));
        let offset = Array2::from_shape_fn((3, net.shape().len()), |(b, j)| (b + 2 * j) as f64 * 0.1 - 0.3);
        let (_, g1) = net.loss_and_gradient_raw(&batch, &(&keep + &offset));
        let (_, g2) = net.loss_and_gradient_raw(&batch, &(&keep + &(&offset * 2.0)));
        assert!(g1.iter().any(|&g| g != 0.0));
        for (a, b) in g1.iter().zip(&g2) {
            assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    fn tasks() -> Vec<EditTask> {
        make_task_suite(0, 6, Shape::new(1, 4, 4)).unwrap()
    }

    fn config(lr: f64, iterations: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: lr,
            batch_size: 4,
            iterations,
            seed: 9,
            null_fraction: 0.2,
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let net = ToyVelocityNet::with_hidden(Shape::new(1, 4, 4), 6, 8, 8, 1).unwrap();
        let out = train(net.clone(), &tasks(), &config(0.0, 5)).unwrap();
        assert_eq!(out.net, net);
        assert_eq!(out.losses.len(), 5);
    }

    #[test]
    fn training_is_deterministic() {
        let net = ToyVelocityNet::with_hidden(Shape::new(1, 4, 4), 6, 8, 8, 1).unwrap();
        let a = train(net.clone(), &tasks(), &config(1e-3, 20)).unwrap();
        let b = train(net, &tasks(), &config(1e-3, 20)).unwrap();
        assert_eq!(a.net, b.net);
        assert_eq!(a.losses, b.losses);
    }

    #[test]
    fn training_reports_divergence_and_bad_config() {
        let net = ToyVelocityNet::with_hidden(Shape::new(1, 4, 4), 6, 8, 8, 1).unwrap();
        assert!(matches!(
            train(net.clone(), &tasks(), &config(1e6, 200)),
            Err(Error::Diverged { .. })
        ));
        let mut cfg = config(1e-3, 1);
        cfg.batch_size = 0;
        assert!(matches!(
            train(net.clone(), &tasks(), &cfg),
            Err(Error::InvalidConfig { field: "batch_size", .. })
        ));
        assert!(train(net, &[], &config(1e-3, 1)).is_err());
    }

    #[test]
    fn overfits_a_single_example() {
        let net = ToyVelocityNet::with_hidden(Shape::new(1, 4, 4), 6, 16, 16, 2).unwrap();
        let task = &tasks()[0];
        let example = TrainingExample {
            sample: FlowSample::new(task.x_edit.clone(), standard_normal(task.shape(), 3), 0.5).unwrap(),
            source: task.x_orig.clone(),
            instruction: task.instruction.code(),
        };
        let out = fit_examples(net, &[example], 0.02, 400).unwrap();
        let first = out.losses[0];
        let last = *out.losses.last().unwrap();
        assert!(last < 0.1 * first, "{first} -> {last}");
    }

    #[test]
    fn guidance_identities() {
        let one = |v| LatentGrid::new(Shape::new(1, 1, 1), vec![v]).unwrap();
        assert_eq!(combine_guidance(&one(1.0), &one(2.0), 2.0).unwrap(), one(3.0));
        assert_eq!(combine_guidance(&one(1.0), &one(2.0), 1.0).unwrap(), one(2.0));
        assert_eq!(combine_guidance(&one(1.0), &one(2.0), 0.0).unwrap(), one(1.0));

        let net = small_net(41);
        let x = standard_normal(net.shape(), 1);
        let src = standard_normal(net.shape(), 2);
        let cond = net.forward(&x, 0.3, &src, 2).unwrap();
        let null = net.forward(&x, 0.3, &src, 0).unwrap();
        assert_eq!(cfg_velocity(&net, &x, 0.3, &src, 2, 1.0).unwrap(), cond);
        assert_eq!(cfg_velocity(&net, &x, 0.3, &src, 2, 0.0).unwrap(), null);
        let model = CfgModel { model: &net, scale: 1.0 };
        let c = Condition::new(src, 2);
        assert_eq!(model.velocity(&x, 0.3, &c).unwrap(), cond);
    }

    #[test]
    fn model_bytes_round_trip() {
        let net = small_net(51);
        let back = ToyVelocityNet::from_bytes(&net.to_bytes()).unwrap();
        for (a, b) in net.params().iter().zip(back.params()) {
            assert_eq!(*b, f64::from(*a as f32));
        }
        assert_eq!(back.to_bytes(), net.to_bytes());
        let x = standard_normal(net.shape(), 1);
        let src = standard_normal(net.shape(), 2);
        let va = net.forward(&x, 0.6, &src, 1).unwrap();
        let vb = back.forward(&x, 0.6, &src, 1).unwrap();
        for (a, b) in va.as_slice().iter().zip(vb.as_slice()) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
        }
    }

    #[test]
    fn model_bytes_errors() {
        let bytes = small_net(61).to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ToyVelocityNet::from_bytes(&bad), Err(Error::ModelFormat(m)) if m.contains("magic")));
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(ToyVelocityNet::from_bytes(cut), Err(Error::ModelFormat(m)) if m.contains("truncated")));
        assert!(matches!(ToyVelocityNet::from_bytes(&bytes[..10]), Err(Error::ModelFormat(m)) if m.contains("truncated")));
        let mut long = bytes.clone();
        long.extend_from_slice(&[0; 4]);
        assert!(ToyVelocityNet::from_bytes(&long).is_err());
        // header claims a larger grid than the parameters cover
        let mut wrong = bytes;
        wrong[8..12].copy_from_slice(&9u32.to_le_bytes());
        assert!(ToyVelocityNet::from_bytes(&wrong).is_err());
    }
}
