//! Evaluation pipeline and reports.
//!
//! Per sequence: reset model state, brightness tracker and decision state;
//! per frame: optional brightness adjustment, forward pass, raw correctness
//! (either convention's argmax right), decision fusion, final correctness
//! (the chosen convention's ID equals that convention's label).
//!
//! Head outputs do not depend on the decision criterion, so sweeps collect
//! outputs once and re-run only the decision stage per criterion.

use std::path::Path;

use laneid_core::brightness::{adjust, BrightnessConfig, BrightnessTracker};
use laneid_core::conventions::Convention;
use laneid_core::decision::{decide_with, DecisionCriterion, DecisionState};
use laneid_core::model::{forward_frame, reset_state, ModelConfig, ModelOutput};
use laneid_core::objective::argmax;
use laneid_core::optim::ParamSet;
use laneid_core::Tensor;

use serde::Serialize;

use crate::dataset::Corpus;
use crate::error::{Error, Result};
use crate::threads::parallel_map;

pub const CLASSES: usize = 8;

/// Exact evaluation counters; all accuracies are correct/total.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Metrics {
    pub frames: u64,
    pub raw_correct: u64,
    pub final_correct: u64,
    pub left_correct: u64,
    pub right_correct: u64,
    pub count_correct: u64,
    /// Confusion counts per head (left, right, count): `[head][truth][pred]`,
    /// classes 0-based.
    pub confusion: Vec<[[u64; CLASSES]; CLASSES]>,
}

impl Default for Metrics {
    fn default() -> Self {
        Metrics {
            frames: 0,
            raw_correct: 0,
            final_correct: 0,
            left_correct: 0,
            right_correct: 0,
            count_correct: 0,
            confusion: vec![[[0; CLASSES]; CLASSES]; 3],
        }
    }
}

impl Metrics {
    pub fn merge(&mut self, other: &Metrics) {
        self.frames += other.frames;
        self.raw_correct += other.raw_correct;
        self.final_correct += other.final_correct;
        self.left_correct += other.left_correct;
        self.right_correct += other.right_correct;
        self.count_correct += other.count_correct;
        for (a, b) in self.confusion.iter_mut().zip(other.confusion.iter()) {
            for (ra, rb) in a.iter_mut().zip(b.iter()) {
                for (va, vb) in ra.iter_mut().zip(rb.iter()) {
                    *va += vb;
                }
            }
        }
    }

    fn frac(&self, count: u64) -> f64 {
        if self.frames == 0 {
            0.0
        } else {
            count as f64 / self.frames as f64
        }
    }

    /// At least one convention's argmax was correct (upper bound).
    pub fn raw_combined(&self) -> f64 {
        self.frac(self.raw_correct)
    }

    /// The fused single estimate was correct.
    pub fn final_accuracy(&self) -> f64 {
        self.frac(self.final_correct)
    }

    pub fn left_only(&self) -> f64 {
        self.frac(self.left_correct)
    }

    pub fn right_only(&self) -> f64 {
        self.frac(self.right_correct)
    }

    pub fn count_accuracy(&self) -> f64 {
        self.frac(self.count_correct)
    }

    pub fn summary(&self) -> MetricsSummary {
        MetricsSummary {
            frames: self.frames,
            raw_combined: self.raw_combined(),
            final_accuracy: self.final_accuracy(),
            left_only: self.left_only(),
            right_only: self.right_only(),
            count_accuracy: self.count_accuracy(),
        }
    }
}

/// JSON-friendly accuracy summary.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsSummary {
    pub frames: u64,
    pub raw_combined: f64,
    pub final_accuracy: f64,
    pub left_only: f64,
    pub right_only: f64,
    pub count_accuracy: f64,
}

/// Per-frame head outputs for every sequence of a corpus.
pub type CorpusOutputs = Vec<Vec<ModelOutput>>;

/// Anything that maps a preprocessed frame stream to per-frame outputs.
/// Implementations must reset their recurrent state per call.
pub trait SequencePredictor: Sync {
    fn predict_sequence(&self, seq_index: usize, frames: &[Tensor]) -> Result<Vec<ModelOutput>>;
}

/// The real model as a predictor.
pub struct ModelPredictor<'a> {
    pub params: &'a ParamSet,
    pub config: &'a ModelConfig,
}

impl SequencePredictor for ModelPredictor<'_> {
    fn predict_sequence(&self, _seq_index: usize, frames: &[Tensor]) -> Result<Vec<ModelOutput>> {
        let mut state = reset_state(self.config);
        let mut outputs = Vec::with_capacity(frames.len());
        for frame in frames {
            let (out, next) = forward_frame(self.params, self.config, &state, frame)?;
            outputs.push(out);
            state = next;
        }
        Ok(outputs)
    }
}

/// Evaluation-time knobs.
#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub brightness: BrightnessConfig,
    pub criterion: DecisionCriterion,
    /// Scores raw entropy instead of its negation for the `e` criterion.
    pub flip_entropy: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            brightness: BrightnessConfig::disabled(),
            criterion: DecisionCriterion::MaxMinusMean,
            flip_entropy: false,
        }
    }
}

/// Runs brightness preprocessing and the predictor over every sequence,
/// in parallel across sequences.
pub fn collect_outputs(
    predictor: &dyn SequencePredictor,
    corpus: &Corpus,
    brightness: &BrightnessConfig,
) -> Result<CorpusOutputs> {
    let indices: Vec<usize> = (0..corpus.sequences.len()).collect();
    let results = parallel_map(indices, |_, seq_index| {
        let seq = &corpus.sequences[seq_index];
        let mut tracker = BrightnessTracker::new(*brightness);
        let mut tensors = Vec::with_capacity(seq.frames.len());
        for img in &seq.frames {
            let (adjusted, _) = adjust(img, &mut tracker)?;
            tensors.push(adjusted.to_tensor());
        }
        predictor.predict_sequence(seq_index, &tensors)
    });
    results.into_iter().collect()
}

/// Scores previously collected outputs under one criterion.
pub fn score_outputs(
    outputs: &CorpusOutputs,
    corpus: &Corpus,
    criterion: DecisionCriterion,
    flip_entropy: bool,
) -> Metrics {
    let mut metrics = Metrics::default();
    for (seq, seq_outputs) in corpus.sequences.iter().zip(outputs.iter()) {
        let mut decision_state = DecisionState::new();
        for (out, label) in seq_outputs.iter().zip(seq.labels.iter()) {
            let left_id = argmax(&out.left_probs) as u8 + 1;
            let right_id = argmax(&out.right_probs) as u8 + 1;
            let count_id = argmax(&out.count_probs) as u8 + 1;

            let left_ok = left_id == label.delta_l;
            let right_ok = right_id == label.delta_r;
            let (est, next_state) = decide_with(
                &out.left_probs,
                &out.right_probs,
                &out.count_probs,
                &decision_state,
                criterion,
                flip_entropy,
            );
            decision_state = next_state;
            let final_ok = match est.convention {
                Convention::Left => est.lane_id == label.delta_l,
                Convention::Right => est.lane_id == label.delta_r,
            };

            metrics.frames += 1;
            metrics.raw_correct += (left_ok || right_ok) as u64;
            metrics.left_correct += left_ok as u64;
            metrics.right_correct += right_ok as u64;
            metrics.final_correct += final_ok as u64;
            metrics.count_correct += (count_id == label.lane_count) as u64;
            metrics.confusion[0][(label.delta_l - 1) as usize][(left_id - 1) as usize] += 1;
            metrics.confusion[1][(label.delta_r - 1) as usize][(right_id - 1) as usize] += 1;
            metrics.confusion[2][(label.lane_count - 1) as usize][(count_id - 1) as usize] += 1;
        }
    }
    metrics
}

/// Full evaluation with an arbitrary predictor.
pub fn evaluate_with(
    predictor: &dyn SequencePredictor,
    corpus: &Corpus,
    opts: &EvalOptions,
) -> Result<Metrics> {
    let outputs = collect_outputs(predictor, corpus, &opts.brightness)?;
    Ok(score_outputs(&outputs, corpus, opts.criterion, opts.flip_entropy))
}

/// Full evaluation of a checkpointed model over a corpus.
pub fn evaluate(params: &ParamSet, config: &ModelConfig, corpus: &Corpus, opts: &EvalOptions) -> Result<Metrics> {
    check_dims(config, corpus)?;
    let predictor = ModelPredictor { params, config };
    evaluate_with(&predictor, corpus, opts)
}

pub fn check_dims(config: &ModelConfig, corpus: &Corpus) -> Result<()> {
    if corpus.manifest.width != config.input_width || corpus.manifest.height != config.input_height {
        return Err(Error::DimMismatch {
            detail: format!(
                "corpus frames are {}x{}, checkpoint expects {}x{}",
                corpus.manifest.width, corpus.manifest.height, config.input_width, config.input_height
            ),
        });
    }
    Ok(())
}

/// One row of the brightness sweep: `threshold = None` is the disabled run.
#[derive(Debug, Clone)]
pub struct BrightnessSweepRow {
    pub threshold: Option<f64>,
    pub metrics: Metrics,
}

/// Evaluates disabled plus each threshold.
pub fn sweep_brightness(
    params: &ParamSet,
    config: &ModelConfig,
    corpus: &Corpus,
    thresholds: &[f64],
    criterion: DecisionCriterion,
) -> Result<Vec<BrightnessSweepRow>> {
    check_dims(config, corpus)?;
    let predictor = ModelPredictor { params, config };
    let mut rows = Vec::with_capacity(thresholds.len() + 1);
    let disabled = collect_outputs(&predictor, corpus, &BrightnessConfig::disabled())?;
    rows.push(BrightnessSweepRow {
        threshold: None,
        metrics: score_outputs(&disabled, corpus, criterion, false),
    });
    for &t in thresholds {
        let outputs = collect_outputs(&predictor, corpus, &BrightnessConfig::with_threshold(t))?;
        rows.push(BrightnessSweepRow {
            threshold: Some(t),
            metrics: score_outputs(&outputs, corpus, criterion, false),
        });
    }
    Ok(rows)
}

pub fn brightness_sweep_csv(variant: &str, rows: &[BrightnessSweepRow]) -> String {
    let mut csv = String::from("variant,threshold,raw,final,left_only,right_only,count\n");
    for row in rows {
        let t = row.threshold.map_or("off".to_string(), |t| format!("{t}"));
        let m = &row.metrics;
        csv.push_str(&format!(
            "{variant},{t},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            m.raw_combined(),
            m.final_accuracy(),
            m.left_only(),
            m.right_only(),
            m.count_accuracy()
        ));
    }
    csv
}

/// Decision-criterion sweep: raw accuracy is criterion-independent and
/// reported once; outputs are collected a single time.
#[derive(Debug, Clone)]
pub struct DecisionSweep {
    pub raw: f64,
    /// `(criterion, final accuracy)` for all five criteria.
    pub finals: Vec<(DecisionCriterion, f64)>,
    pub metrics: Vec<(DecisionCriterion, Metrics)>,
}

pub fn sweep_decision(
    params: &ParamSet,
    config: &ModelConfig,
    corpus: &Corpus,
    brightness: &BrightnessConfig,
) -> Result<DecisionSweep> {
    check_dims(config, corpus)?;
    let predictor = ModelPredictor { params, config };
    let outputs = collect_outputs(&predictor, corpus, brightness)?;
    sweep_decision_outputs(&outputs, corpus)
}

pub fn sweep_decision_outputs(outputs: &CorpusOutputs, corpus: &Corpus) -> Result<DecisionSweep> {
    let mut finals = Vec::new();
    let mut metrics = Vec::new();
    let mut raw = None;
    for criterion in DecisionCriterion::ALL {
        let m = score_outputs(outputs, corpus, criterion, false);
        match raw {
            None => raw = Some(m.raw_combined()),
            Some(r) => debug_assert_eq!(r, m.raw_combined(), "raw must not depend on the criterion"),
        }
        finals.push((criterion, m.final_accuracy()));
        metrics.push((criterion, m));
    }
    Ok(DecisionSweep { raw: raw.unwrap_or(0.0), finals, metrics })
}

pub fn decision_sweep_csv(variant: &str, sweep: &DecisionSweep) -> String {
    let mut csv = String::from("variant,raw");
    for (criterion, _) in &sweep.finals {
        csv.push_str(&format!(",final_{}", criterion.name()));
    }
    csv.push('\n');
    csv.push_str(&format!("{variant},{:.6}", sweep.raw));
    for (_, acc) in &sweep.finals {
        csv.push_str(&format!(",{acc:.6}"));
    }
    csv.push('\n');
    csv
}

/// Per-frame inference record written by `laneid infer`.
#[derive(Debug, Serialize)]
pub struct InferRecord {
    pub sequence: u64,
    pub frame: usize,
    pub convention: Convention,
    pub lane_id: u8,
    pub lane_count: u8,
    pub companion_id: u8,
    pub score_left: f64,
    pub score_right: f64,
}

/// Runs the full pipeline and writes one JSON line per frame.
pub fn infer_to_jsonl(
    params: &ParamSet,
    config: &ModelConfig,
    corpus: &Corpus,
    opts: &EvalOptions,
    out: &Path,
) -> Result<()> {
    check_dims(config, corpus)?;
    let predictor = ModelPredictor { params, config };
    let outputs = collect_outputs(&predictor, corpus, &opts.brightness)?;
    let mut lines = String::new();
    for (seq, seq_outputs) in corpus.sequences.iter().zip(outputs.iter()) {
        let mut state = DecisionState::new();
        for (t, out_frame) in seq_outputs.iter().enumerate() {
            let (est, next) = decide_with(
                &out_frame.left_probs,
                &out_frame.right_probs,
                &out_frame.count_probs,
                &state,
                opts.criterion,
                opts.flip_entropy,
            );
            state = next;
            let record = InferRecord {
                sequence: seq.id,
                frame: t,
                convention: est.convention,
                lane_id: est.lane_id,
                lane_count: est.lane_count,
                companion_id: est.companion_id,
                score_left: est.score_left,
                score_right: est.score_right,
            };
            lines.push_str(
                &serde_json::to_string(&record)
                    .map_err(|source| Error::Json { path: out.to_path_buf(), source })?,
            );
            lines.push('\n');
        }
    }
    std::fs::write(out, lines).map_err(crate::error::io_err(out))
}
