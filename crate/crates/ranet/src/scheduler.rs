//! Step-program execution: full anytime forward passes and confidence-gated
//! adaptive inference.
//!
//! The compiled step list is ordered so that classifier k's minimal
//! prerequisite set is exactly the prefix ending at its logits step. The
//! adaptive path exploits that directly: execute steps in order, pause at
//! each classifier, and stop as soon as the prediction clears the threshold.

use crate::builder::{NetworkGraph, StepOp};
use crate::error::{Error, Result};
use crate::tensor::{softmax_rows, BnMode, ParamStore, Tape, Tensor, Var};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// When to stop during adaptive inference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExitPolicy {
    /// Confidence threshold epsilon. A sample exits at the first classifier
    /// whose top softmax probability reaches it; values above 1 disable
    /// early exit, zero exits everything at the first classifier.
    pub epsilon: f32,
}

/// Top softmax probability of one probability row.
pub fn confidence(probs_row: &[f32]) -> f32 {
    probs_row.iter().copied().fold(f32::NEG_INFINITY, f32::max)
}

/// First classifier (1-based) whose confidence reaches `epsilon`; the last
/// one answers when none does.
pub fn select_exit(confidences: &[f32], epsilon: f32) -> usize {
    for (i, &c) in confidences.iter().enumerate() {
        if c >= epsilon {
            return i + 1;
        }
    }
    confidences.len()
}

/// Lazy executor of a graph's step program on one tape.
///
/// Values are computed in program order on demand; `run_through` advances the
/// cursor, so repeated calls never recompute a step. One `Execution` handles
/// one input batch.
pub struct Execution<'g> {
    pub tape: Tape,
    graph: &'g NetworkGraph,
    values: Vec<Option<Var>>,
    param_vars: Vec<Option<Var>>,
    next_step: usize,
    mode: BnMode,
}

impl<'g> Execution<'g> {
    /// Start an execution. Training mode records backward metadata; eval mode
    /// uses an inference tape and running batch-norm statistics.
    pub fn new(graph: &'g NetworkGraph, input: Tensor, mode: BnMode) -> Result<Self> {
        let [_, c, h, w] = input.shape();
        let expect = (
            graph.config.input_channels,
            graph.config.input_resolution.0,
            graph.config.input_resolution.1,
        );
        if (c, h, w) != expect {
            return Err(Error::Data(format!(
                "input shape {}x{}x{} does not match configured {}x{}x{}",
                c, h, w, expect.0, expect.1, expect.2
            )));
        }
        let mut tape = match mode {
            BnMode::Train => Tape::new(),
            BnMode::Eval => Tape::inference(),
        };
        let mut values = vec![None; graph.num_values];
        values[graph.input_value] = Some(tape.leaf(input, false));
        Ok(Self {
            tape,
            graph,
            values,
            param_vars: vec![None; graph.params.len()],
            next_step: 0,
            mode,
        })
    }

    fn param_var(&mut self, store: &ParamStore, id: usize) -> Var {
        if let Some(v) = self.param_vars[id] {
            return v;
        }
        let v = self.tape.param(store, id);
        self.param_vars[id] = Some(v);
        v
    }

    /// Execute steps up to and including `step_idx`.
    pub fn run_through(&mut self, store: &mut ParamStore, step_idx: usize) -> Result<()> {
        if step_idx >= self.graph.steps.len() {
            return Err(Error::Usage(format!("step {} out of range", step_idx)));
        }
        while self.next_step <= step_idx {
            let i = self.next_step;
            let step = &self.graph.steps[i];
            let inputs: Vec<Var> = step
                .inputs
                .iter()
                .map(|&vid| self.values[vid].expect("step inputs precede it in program order"))
                .collect();
            let out = match step.op {
                StepOp::Conv { kernel, stride, padding } => {
                    let k = self.param_var(store, kernel);
                    self.tape.conv2d(inputs[0], k, stride, padding)?
                }
                StepOp::BatchNorm { gamma, beta, stats } => {
                    let g = self.param_var(store, gamma);
                    let b = self.param_var(store, beta);
                    self.tape.batch_norm(
                        inputs[0],
                        g,
                        b,
                        store.stats_mut(stats),
                        self.mode,
                        BN_MOMENTUM,
                        BN_EPS,
                    )?
                }
                StepOp::Relu => self.tape.relu(inputs[0]),
                StepOp::AvgPool2x2 => self.tape.avg_pool_2x2(inputs[0])?,
                StepOp::UpsampleBilinear2x => self.tape.upsample_bilinear_2x(inputs[0]),
                StepOp::Concat => self.tape.concat_channels(&inputs)?,
                StepOp::GlobalAvgPool => self.tape.global_avg_pool(inputs[0]),
                StepOp::Linear { weight, bias } => {
                    let w = self.param_var(store, weight);
                    let b = self.param_var(store, bias);
                    self.tape.linear(inputs[0], w, b)?
                }
            };
            self.values[self.graph.steps[i].output] = Some(out);
            self.next_step += 1;
        }
        Ok(())
    }

    /// Logits of classifier `k` (1-based), executing its prefix if needed.
    pub fn logits(&mut self, store: &mut ParamStore, k: usize) -> Result<Var> {
        if k == 0 || k > self.graph.num_classifiers() {
            return Err(Error::Usage(format!("classifier {} out of range", k)));
        }
        let idx = self.graph.classifier_steps[k - 1];
        self.run_through(store, idx)?;
        Ok(self.values[self.graph.steps[idx].output].unwrap())
    }

    /// Steps executed so far.
    pub fn steps_run(&self) -> usize {
        self.next_step
    }

    /// Per-sample MACs of the executed prefix.
    pub fn macs_used(&self) -> u64 {
        if self.next_step == 0 {
            0
        } else {
            self.graph.prefix_macs_at(self.next_step - 1)
        }
    }
}

/// Run the whole network once and return softmax probabilities of every
/// classifier, each of shape `(N, num_classes, 1, 1)`.
pub fn forward_anytime(
    graph: &NetworkGraph,
    store: &mut ParamStore,
    input: Tensor,
    mode: BnMode,
) -> Result<Vec<Tensor>> {
    let mut exec = Execution::new(graph, input, mode)?;
    let mut out = Vec::with_capacity(graph.num_classifiers());
    for k in 1..=graph.num_classifiers() {
        let logits = exec.logits(store, k)?;
        out.push(softmax_rows(exec.tape.value(logits)));
    }
    Ok(out)
}

/// Result of one adaptive single-sample inference.
#[derive(Debug, Clone)]
pub struct AdaptiveResult {
    /// Classifier that answered (1-based).
    pub exit_index: usize,
    /// Predicted class at the exit.
    pub prediction: usize,
    /// Confidence at the exit.
    pub confidence: f32,
    /// Softmax probabilities at the exit.
    pub probs: Vec<f32>,
    pub steps_run: usize,
    pub macs_used: u64,
}

/// Run one sample through the network lazily, exiting at the first classifier
/// whose confidence reaches the policy threshold. Eval mode only.
pub fn forward_adaptive(
    graph: &NetworkGraph,
    store: &mut ParamStore,
    input: Tensor,
    policy: ExitPolicy,
) -> Result<AdaptiveResult> {
    if input.shape()[0] != 1 {
        return Err(Error::Usage(format!(
            "adaptive inference takes one sample at a time, got batch of {}",
            input.shape()[0]
        )));
    }
    let k_max = graph.num_classifiers();
    let mut exec = Execution::new(graph, input, BnMode::Eval)?;
    let mut last: Option<AdaptiveResult> = None;
    for k in 1..=k_max {
        let logits = exec.logits(store, k)?;
        let probs = softmax_rows(exec.tape.value(logits));
        let row = probs.data().to_vec();
        let conf = confidence(&row);
        let pred = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        let result = AdaptiveResult {
            exit_index: k,
            prediction: pred,
            confidence: conf,
            probs: row,
            steps_run: exec.steps_run(),
            macs_used: exec.macs_used(),
        };
        if conf >= policy.epsilon {
            return Ok(result);
        }
        last = Some(result);
    }
    Ok(last.expect("network has at least one classifier"))
}

/// One evaluated sample: what every classifier said about it.
#[derive(Debug, Clone)]
pub struct SampleTrace {
    pub label: usize,
    /// Per classifier: predicted class.
    pub predictions: Vec<usize>,
    /// Per classifier: top softmax probability.
    pub confidences: Vec<f32>,
}

/// Full-network evaluation traces for a dataset, the raw material for both
/// threshold calibration and budgeted evaluation.
#[derive(Debug, Clone, Default)]
pub struct InferenceTrace {
    pub samples: Vec<SampleTrace>,
    /// Cumulative per-sample MACs of each classifier's prefix.
    pub classifier_costs: Vec<u64>,
}

impl InferenceTrace {
    pub fn num_classifiers(&self) -> usize {
        self.classifier_costs.len()
    }

    /// Accuracy if every sample exited at classifier `k` (1-based).
    pub fn accuracy_at(&self, k: usize) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let hits = self
            .samples
            .iter()
            .filter(|s| s.predictions[k - 1] == s.label)
            .count();
        hits as f64 / self.samples.len() as f64
    }

    /// CSV dump: one row per sample with label, per-classifier prediction and
    /// confidence.
    pub fn to_csv(&self) -> String {
        let k = self.num_classifiers();
        let mut out = String::from("label");
        for i in 1..=k {
            out.push_str(&format!(",pred_{},conf_{}", i, i));
        }
        out.push('\n');
        for s in &self.samples {
            out.push_str(&s.label.to_string());
            for i in 0..k {
                out.push_str(&format!(",{},{}", s.predictions[i], s.confidences[i]));
            }
            out.push('\n');
        }
        out
    }
}

/// Evaluate a labeled set with full forward passes, batched, in eval mode.
pub fn collect_traces(
    graph: &NetworkGraph,
    store: &mut ParamStore,
    images: &[Tensor],
    labels: &[usize],
    batch_size: usize,
) -> Result<InferenceTrace> {
    if images.len() != labels.len() {
        return Err(Error::Usage(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    if batch_size == 0 {
        return Err(Error::Usage("batch size must be positive".into()));
    }
    let k = graph.num_classifiers();
    let mut trace = InferenceTrace {
        samples: Vec::with_capacity(images.len()),
        classifier_costs: graph.classifier_costs(),
    };
    let mut start = 0;
    while start < images.len() {
        let end = (start + batch_size).min(images.len());
        let batch = stack_batch(&images[start..end])?;
        let probs = forward_anytime(graph, store, batch, BnMode::Eval)?;
        for s in 0..end - start {
            let mut predictions = Vec::with_capacity(k);
            let mut confidences = Vec::with_capacity(k);
            for p in &probs {
                let classes = p.shape()[1];
                let row = &p.data()[s * classes..(s + 1) * classes];
                let (pred, &conf) = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap();
                predictions.push(pred);
                confidences.push(conf);
            }
            trace.samples.push(SampleTrace { label: labels[start + s], predictions, confidences });
        }
        start = end;
    }
    Ok(trace)
}

/// Stack same-shaped single-sample tensors into one batch.
pub fn stack_batch(images: &[Tensor]) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::Usage("cannot stack an empty batch".into()));
    }
    let [_, c, h, w] = images[0].shape();
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if img.shape() != [1, c, h, w] {
            return Err(Error::Data(format!(
                "batch member shape {:?} differs from {:?}",
                img.shape(),
                [1, c, h, w]
            )));
        }
        data.extend_from_slice(img.data());
    }
    Tensor::new([images.len(), c, h, w], data)
}
