//! Training loop: sequence-window batches, augmentation, truncated
//! backpropagation through time over the window, Adam with the halving
//! schedule, JSONL logging and a checkpoint at the end (or on abort).
//!
//! Determinism: all sampling comes from seeded streams, batch items may run
//! on worker threads but their gradients are reduced in batch order, so two
//! runs with the same config produce bit-identical checkpoints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use laneid_core::brightness::Image;
use laneid_core::conventions::LaneLabel;
use laneid_core::graph::Graph;
use laneid_core::model::{bind_params, bind_state, init_params, reset_state, trace_forward};
use laneid_core::objective::trace_total_loss;
use laneid_core::optim::{adam_step, AdamState, LrSchedule, ParamSet};
use laneid_core::rng::Rng;
use laneid_core::Tensor;

use serde::Serialize;

use crate::augment::augment;
use crate::checkpoint::save_checkpoint;
use crate::dataset::{load_corpus, Corpus};
use crate::error::{io_err, Error, Result};
use crate::runconfig::RunConfig;
use crate::threads::parallel_map;

#[derive(Debug, Serialize)]
struct LogLine {
    iteration: u64,
    loss: f64,
    lr: f64,
}

#[derive(Debug)]
pub struct TrainSummary {
    pub iterations: u64,
    pub final_loss: f64,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

/// One sampled batch item: an augmented window as tensors plus its labels.
struct BatchItem {
    frames: Vec<Tensor>,
    labels: Vec<LaneLabel>,
}

fn sample_item(corpus: &Corpus, seq_len: usize, sample_rng: &mut Rng, augment_rng: &mut Rng, config: &RunConfig) -> Result<BatchItem> {
    let seq = &corpus.sequences[sample_rng.range_u64(0, corpus.sequences.len() as u64 - 1) as usize];
    if seq.frames.len() < seq_len {
        return Err(Error::Config {
            detail: format!(
                "sequence has {} frames, sequence_length is {seq_len}",
                seq.frames.len()
            ),
        });
    }
    let start = sample_rng.range_u64(0, (seq.frames.len() - seq_len) as u64) as usize;
    let window: Vec<Image> = seq.frames[start..start + seq_len].to_vec();
    let labels: Vec<LaneLabel> = seq.labels[start..start + seq_len].to_vec();
    let (frames, labels) = augment(&window, &labels, &config.augment, augment_rng);
    Ok(BatchItem { frames: frames.iter().map(|f| f.to_tensor()).collect(), labels })
}

/// Forward + backward over one window on its own tape. Returns the mean
/// frame loss and per-parameter gradients.
fn item_loss_and_grads(
    params: &ParamSet,
    config: &RunConfig,
    item: &BatchItem,
) -> laneid_core::Result<(f64, Vec<Option<Tensor>>)> {
    let mut g = Graph::new();
    let pn = bind_params(&mut g, params);
    let mut sn = bind_state(&mut g, &reset_state(&config.model));
    let mut per_frame = Vec::with_capacity(item.frames.len());
    for (img, label) in item.frames.iter().zip(item.labels.iter()) {
        let (heads, next) = trace_forward(&mut g, &pn, params, &config.model, &sn, img)?;
        sn = next;
        let (node, _) = trace_total_loss(&mut g, &heads, label, config.z_offset)?;
        per_frame.push(node);
    }
    let coeffs = vec![1.0 / per_frame.len() as f64; per_frame.len()];
    let total = g.affine_scalars(&per_frame, &coeffs, 0.0)?;
    let loss = g.value(total).item();
    let mut grads = g.backward(total)?;
    Ok((loss, pn.take_grads(&mut grads)))
}

/// Trains per the config and writes the checkpoint to `out`.
pub fn train(config: &RunConfig, out: &Path) -> Result<TrainSummary> {
    config.validate()?;
    let corpus = load_corpus(&config.train_data)?;
    if corpus.manifest.width != config.model.input_width
        || corpus.manifest.height != config.model.input_height
    {
        return Err(Error::DimMismatch {
            detail: format!(
                "corpus frames are {}x{}, model expects {}x{}",
                corpus.manifest.width,
                corpus.manifest.height,
                config.model.input_width,
                config.model.input_height
            ),
        });
    }
    if corpus.sequences.is_empty() {
        return Err(Error::Config { detail: "empty training corpus".into() });
    }

    let mut params = init_params(&config.model, config.seed)?;
    let mut adam = AdamState::new(
        &params,
        config.optimizer.beta1,
        config.optimizer.beta2,
        config.optimizer.learning_rate,
        config.optimizer.weight_decay,
    );
    let schedule = LrSchedule::scaled(config.optimizer.learning_rate, config.schedule_scale);
    let mut sample_rng = Rng::derive(config.seed, 0x5a17);
    let mut augment_rng = Rng::derive(config.seed, 0xa06);

    let log_path = config
        .log
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.log.jsonl", out.display())));
    let mut log = fs::File::create(&log_path).map_err(io_err(&log_path))?;

    let mut last_loss = f64::NAN;
    for iteration in 0..config.iterations {
        let mut items = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            items.push(sample_item(&corpus, config.sequence_length, &mut sample_rng, &mut augment_rng, config)?);
        }

        // Forward/backward per item in parallel; reduce in batch order.
        let results = parallel_map(items, |_, item| item_loss_and_grads(&params, config, &item));
        params.zero_grads();
        let mut batch_loss = 0.0;
        for result in results {
            let (loss, grads) = result?;
            batch_loss += loss;
            for (id, grad) in grads.into_iter().enumerate() {
                if let Some(grad) = grad {
                    params.accumulate_grad(id, &grad)?;
                }
            }
        }
        let batch_loss = batch_loss / config.batch_size as f64;
        let inv = 1.0 / config.batch_size as f64;
        for id in 0..params.len() {
            for v in params.get_mut(id).grad.data_mut() {
                *v *= inv;
            }
        }

        if !batch_loss.is_finite() {
            save_checkpoint(&params, &config.model, out)?;
            return Err(Error::NonFiniteLoss { iteration });
        }

        let lr = schedule.at(iteration);
        adam_step(&mut params, &mut adam, lr)?;
        last_loss = batch_loss;

        let line = LogLine { iteration, loss: batch_loss, lr };
        let json = serde_json::to_string(&line)
            .map_err(|source| Error::Json { path: log_path.clone(), source })?;
        writeln!(log, "{json}").map_err(io_err(&log_path))?;
    }

    save_checkpoint(&params, &config.model, out)?;
    Ok(TrainSummary {
        iterations: config.iterations,
        final_loss: last_loss,
        checkpoint: out.to_path_buf(),
        log: log_path,
    })
}
