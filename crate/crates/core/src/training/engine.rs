//! The shared optimisation loop.
//!
//! One loop covers every regime: a list of models trained in lockstep on the
//! same batches, each with its own optimizer and dropout stream, plus an
//! optional extra signal (a frozen teacher, or the other peers).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TrainingError;
use crate::model::{mix_log_probs, Batch, Dropout, ParserModel};
use crate::numerics::{
    log_softmax_rows, softmax_rows_temperature, AdamConfig, Graph, OptimizerState, Targets, Tensor,
};

/// Seeds of one trained model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RunSeeds {
    pub init: u64,
    pub data: u64,
    pub dropout: u64,
}

impl RunSeeds {
    pub fn uniform(seed: u64) -> Self {
        RunSeeds {
            init: seed,
            data: seed,
            dropout: seed,
        }
    }

    /// Member `k` of a group sharing one data order.
    pub fn member(seed: u64, k: usize) -> Self {
        RunSeeds {
            init: seed + k as u64,
            data: seed,
            dropout: seed + k as u64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub temperature: f64,
    pub burn_in_steps: usize,
}

/// Encoded training pairs with optional per-example loss weights.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainData {
    pub items: Vec<(Vec<usize>, Vec<usize>)>,
    pub weights: Option<Vec<f64>>,
}

/// A frozen teacher: one model, or several mixed uniformly.
#[derive(Debug, Clone, Copy)]
pub struct Teacher<'a> {
    pub models: &'a [ParserModel],
}

impl Teacher<'_> {
    /// Teacher-forced logits; for several models, the log of the averaged
    /// probabilities.
    pub fn logits(&self, batch: &Batch) -> Tensor {
        if let [m] = self.models {
            return m.teacher_forced_logits(batch);
        }
        let lps: Vec<Tensor> = self
            .models
            .iter()
            .map(|m| log_softmax_rows(&m.teacher_forced_logits(batch)))
            .collect();
        let (r, c) = lps[0].dims2();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let rows: Vec<Vec<f64>> = lps.iter().map(|t| t.row(i).to_vec()).collect();
            out.extend(mix_log_probs(&rows));
        }
        Tensor::matrix(r, c, out)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Signal<'a> {
    None,
    Teacher(Teacher<'a>),
    /// Each model distils from all the others (stop-gradient).
    Peers,
}

/// Epoch-wise shuffled batch order.
struct Order {
    perm: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Order {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        Order { perm, pos: 0, rng }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size.min(self.perm.len()) {
            if self.pos == self.perm.len() {
                self.perm.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.perm[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Trains `models` in lockstep for `schedule.steps` updates. Returns the
/// per-step total loss of each model.
pub fn train_models(
    models: &mut [ParserModel],
    data: &TrainData,
    schedule: &Schedule,
    seeds: &[RunSeeds],
    signal: Signal<'_>,
) -> Result<Vec<Vec<f64>>, TrainingError> {
    assert_eq!(models.len(), seeds.len(), "one seed set per model");
    if data.items.is_empty() {
        return Err(TrainingError::CorpusEmpty);
    }
    if let Some(first) = models.first() {
        if models.iter().any(|m| m.config != first.config || m.vocab != first.vocab) {
            return Err(TrainingError::PeerConfigMismatch);
        }
    }
    let adam = AdamConfig {
        learning_rate: schedule.learning_rate,
        weight_decay: schedule.weight_decay,
        ..AdamConfig::default()
    };
    let mut opts: Vec<OptimizerState> = models
        .iter()
        .map(|m| OptimizerState::new(adam, &m.params.tensors))
        .collect();
    let mut dropouts: Vec<Dropout> = models
        .iter()
        .zip(seeds)
        .map(|(m, s)| Dropout::new(m.config.dropout, s.dropout))
        .collect();
    let mut order = Order::new(data.items.len(), seeds[0].data);
    let t = schedule.temperature;
    let mut curves = vec![Vec::with_capacity(schedule.steps); models.len()];

    for step in 1..=schedule.steps {
        let idx = order.next_batch(schedule.batch_size);
        let pairs: Vec<(&[usize], &[usize])> = idx
            .iter()
            .map(|&i| (data.items[i].0.as_slice(), data.items[i].1.as_slice()))
            .collect();
        let batch = models[0].batch(&pairs)?;
        let row_weights = data.weights.as_ref().map(|w| {
            idx.iter()
                .zip(batch.row_spans())
                .flat_map(|(&i, &(_, len))| std::iter::repeat_n(w[i], len))
                .collect::<Vec<f64>>()
        });
        let kd_active = step > schedule.burn_in_steps;

        let grads: Vec<Vec<Tensor>> = {
            let mut graphs: Vec<(Graph, _)> = models
                .iter()
                .zip(dropouts.iter_mut())
                .map(|(m, d)| {
                    let mut g = Graph::new(&m.params.tensors);
                    let z = m.batch_logits(&mut g, &batch, Some(d));
                    (g, z)
                })
                .collect();
            let targets: Vec<Tensor> = match signal {
                Signal::Peers if kd_active && models.len() > 1 => graphs
                    .iter()
                    .map(|(g, z)| softmax_rows_temperature(g.value(*z), t))
                    .collect(),
                Signal::Teacher(teacher) if kd_active => {
                    vec![softmax_rows_temperature(&teacher.logits(&batch), t)]
                }
                _ => Vec::new(),
            };
            let mut out = Vec::with_capacity(graphs.len());
            for (k, (g, z)) in graphs.iter_mut().enumerate() {
                let nll = g.softmax_xent(
                    *z,
                    Targets::Hard(batch.targets.clone()),
                    1.0,
                    row_weights.clone(),
                );
                let mut loss = match signal {
                    Signal::None => nll,
                    _ if schedule.lambda == 1.0 => nll,
                    _ => g.scale(nll, schedule.lambda),
                };
                let sources: Vec<&Tensor> = match signal {
                    Signal::Peers => targets
                        .iter()
                        .enumerate()
                        .filter(|(j, _)| *j != k)
                        .map(|(_, q)| q)
                        .collect(),
                    _ => targets.iter().collect(),
                };
                for q in sources {
                    let kd = g.softmax_xent(*z, Targets::Soft(q.clone()), t, None);
                    loss = g.add(loss, kd);
                }
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(TrainingError::Diverged { step });
                }
                curves[k].push(value);
                out.push(g.backward(loss)?);
            }
            out
        };
        for ((m, opt), gr) in models.iter_mut().zip(&mut opts).zip(&grads) {
            opt.step(&mut m.params.tensors, gr)?;
        }
    }
    Ok(curves)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_covers_each_epoch() {
        let mut o = Order::new(10, 3);
        let mut seen: Vec<usize> = (0..5).flat_map(|_| o.next_batch(2)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        let mut a = Order::new(10, 3);
        let mut b = Order::new(10, 3);
        for _ in 0..20 {
            assert_eq!(a.next_batch(3), b.next_batch(3));
        }
        assert_eq!(Order::new(3, 1).next_batch(8).len(), 3);
    }
}
