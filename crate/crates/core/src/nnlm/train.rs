use ndarray::{Array2, Zip};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::tape::Graph;
use super::{NnlmConfig, NnlmError, NnlmModel, TrainSchedule};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-token training cross-entropy (nats) over the epoch.
    pub mean_loss: f64,
    pub tokens: u64,
    pub final_lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
}

struct Adam {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: i32,
}

impl Adam {
    fn new(params: &[Array2<f64>]) -> Self {
        let zeros = || params.iter().map(|p| Array2::zeros(p.raw_dim())).collect();
        Self { m: zeros(), v: zeros(), t: 0 }
    }

    fn step(&mut self, params: &mut [Array2<f64>], grads: &[Array2<f64>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
            });
        }
    }
}

/// Gradient of the summed NLL of one sequence, plus that NLL.
pub(crate) fn sequence_gradient(
    model: &NnlmModel,
    ids: &[u32],
    rng: Option<&mut ChaCha8Rng>,
) -> (f64, Vec<Array2<f64>>) {
    let mut grads: Vec<Array2<f64>> = model.params().iter().map(|p| Array2::zeros(p.raw_dim())).collect();
    let mut g = Graph::new(model.params());
    let root = model.loss(&mut g, ids, rng);
    g.backward(root, &mut grads);
    (g.value(root)[[0, 0]], grads)
}

/// Trains with Adam on minibatches drawn from `corpus`, where each sequence
/// is sampled in proportion to its count. Each step's gradient is the mean
/// per-token gradient of the batch; all randomness derives from `seed`.
pub fn train_nnlm(
    config: NnlmConfig,
    schedule: &TrainSchedule,
    corpus: &[(Vec<u32>, u64)],
    seed: u64,
) -> Result<(NnlmModel, TrainLog), NnlmError> {
    let mut model = NnlmModel::new(config, seed)?;
    let weights: Vec<u64> = corpus.iter().map(|(_, n)| *n).collect();
    let sampler = WeightedIndex::new(&weights).map_err(|_| NnlmError::EmptyCorpus)?;
    for (ids, _) in corpus {
        model.check_ids(ids)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(model.params());
    let mut log = TrainLog::default();
    let batch = schedule.batch_sequences.max(1);
    let mut step = 0usize;
    for epoch in 1..=schedule.epochs {
        let (mut loss_sum, mut token_sum) = (0.0, 0u64);
        let mut lr = 0.0;
        for _ in 0..schedule.steps_per_epoch {
            step += 1;
            let picks: Vec<usize> = (0..batch).map(|_| sampler.sample(&mut rng)).collect();
            let results: Vec<(f64, Vec<Array2<f64>>)> = picks
                .par_iter()
                .enumerate()
                .map(|(i, &k)| {
                    let mut drop_rng = ChaCha8Rng::seed_from_u64(seed);
                    drop_rng.set_stream(((step * batch + i) as u64) + 1);
                    sequence_gradient(&model, &corpus[k].0, Some(&mut drop_rng))
                })
                .collect();
            let tokens: u64 = picks.iter().map(|&k| corpus[k].0.len() as u64 + 1).sum();
            let mut grads: Vec<Array2<f64>> = model.params().iter().map(|p| Array2::zeros(p.raw_dim())).collect();
            let mut loss = 0.0;
            for (l, g) in results {
                loss += l;
                for (acc, x) in grads.iter_mut().zip(&g) {
                    *acc += x;
                }
            }
            if !loss.is_finite() {
                return Err(NnlmError::Diverged { step, loss });
            }
            let scale = 1.0 / tokens as f64;
            for g in grads.iter_mut() {
                *g *= scale;
            }
            lr = schedule.learning_rate(step);
            adam.step(model.params_mut(), &grads, lr);
            loss_sum += loss;
            token_sum += tokens;
        }
        let mean_loss = loss_sum / token_sum.max(1) as f64;
        log::debug!("{} epoch {epoch}: loss {mean_loss:.4}, lr {lr:.3e}", model.config().architecture);
        log.epochs.push(EpochStats {
            epoch,
            mean_loss,
            tokens: token_sum,
            final_lr: lr,
        });
    }
    Ok((model, log))
}
