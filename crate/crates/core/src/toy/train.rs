//! AdamW training on the answer position and sliced evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Batch, ToyConfig, ToyModel};
use crate::autodiff::Tape;
use crate::error::ToyError;
use crate::set_disjointness::SdInstance;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.1 }
    }
}

/// First and second moments, one pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        Self { step: 0, m: zeros(), v: zeros() }
    }

    /// One update. Decay applies to matrices only, not to bias vectors.
    pub fn update(&mut self, opt: &AdamW, params: &mut [Tensor<T>], grads: &[Tensor<T>]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - opt.beta1.powi(t);
        let c2 = 1.0 - opt.beta2.powi(t);
        let (b1, b2) = (T::lit(opt.beta1), T::lit(opt.beta2));
        let (ob1, ob2) = (T::lit(1.0 - opt.beta1), T::lit(1.0 - opt.beta2));
        let step = T::lit(opt.lr / c1);
        let inv_c2 = T::lit(1.0 / c2);
        let eps = T::lit(opt.eps);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let decay = if p.rank() >= 2 { T::lit(1.0 - opt.lr * opt.weight_decay) } else { T::one() };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + ob1 * g;
                *v = b2 * *v + ob2 * g * g;
                *w = *w * decay - step * *m / ((*v * inv_c2).sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub config: ToyConfig,
    pub optimizer: AdamW,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub model: ToyModel<T>,
    /// Mean training loss per epoch.
    pub epoch_loss: Vec<f64>,
    /// Set when the loss went non-finite; the model is then unusable.
    pub diverged: bool,
}

fn batch_of(data: &[SdInstance], idx: &[usize]) -> Batch {
    Batch::new(idx.iter().map(|&i| (data[i].input_ids.as_slice(), Some(data[i].target))))
}

/// Trains with cross-entropy at the final position of each instance.
pub fn train<T: Real>(run: &TrainRun, data: &[SdInstance]) -> Result<TrainOutcome<T>, ToyError> {
    train_with(run, data, |_, _, _| {})
}

/// `train`, calling `on_epoch(epoch, mean loss, model)` after every epoch.
pub fn train_with<T: Real>(
    run: &TrainRun,
    data: &[SdInstance],
    mut on_epoch: impl FnMut(usize, f64, &ToyModel<T>),
) -> Result<TrainOutcome<T>, ToyError> {
    if data.is_empty() {
        return Err(ToyError::EmptyDataset);
    }
    if run.batch_size == 0 {
        return Err(ToyError::Config("batch size must be positive".into()));
    }
    let mut model = ToyModel::<T>::init(run.config.clone(), run.seed)?;
    let mut adam = AdamState::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed ^ 0x005e_ed0f_da7a);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_loss = Vec::with_capacity(run.epochs);
    let mut tape = Tape::new();
    for epoch in 0..run.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut count) = (0.0, 0usize);
        for chunk in order.chunks(run.batch_size) {
            let batch = batch_of(data, chunk);
            tape.clear();
            let p = model.tracked(&mut tape);
            let loss = match model.loss(&mut tape, &p, &batch) {
                Ok(l) => l,
                Err(ToyError::Autodiff(_)) | Err(ToyError::Tensor(_)) => {
                    return Ok(TrainOutcome { model, epoch_loss, diverged: true });
                }
                Err(e) => return Err(e),
            };
            let value = tape.value(loss)?.item()?.as_f64();
            if !value.is_finite() {
                return Ok(TrainOutcome { model, epoch_loss, diverged: true });
            }
            let mut g = tape.backward(loss)?;
            let grads = p.iter().map(|&id| g.take(id)).collect::<Result<Vec<_>, _>>()?;
            adam.update(&run.optimizer, &mut model.params, &grads);
            total += value * chunk.len() as f64;
            count += chunk.len();
        }
        epoch_loss.push(total / count as f64);
        on_epoch(epoch, total / count as f64, &model);
    }
    let diverged = model.params.iter().any(|p| !p.is_finite());
    Ok(TrainOutcome { model, epoch_loss, diverged })
}

/// Anything producing one answer token per instance.
pub trait Predictor {
    fn predict(&self, data: &[SdInstance]) -> Result<Vec<u32>, ToyError>;
}

impl<T: Real> Predictor for ToyModel<T> {
    fn predict(&self, data: &[SdInstance]) -> Result<Vec<u32>, ToyError> {
        let mut out = Vec::with_capacity(data.len());
        let idx: Vec<usize> = (0..data.len()).collect();
        for chunk in idx.chunks(64) {
            let logits = self.predict_last(&batch_of(data, chunk))?;
            for r in 0..logits.rows() {
                out.push(argmax(logits.row(r)) as u32);
            }
        }
        Ok(out)
    }
}

fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlicedAccuracy {
    pub overall: f64,
    /// Instances with `|A| < |B|`.
    pub a_smaller: f64,
    /// Instances with `|B| < |A|`.
    pub b_smaller: f64,
    pub n_overall: usize,
    pub n_a_smaller: usize,
    pub n_b_smaller: usize,
}

impl SlicedAccuracy {
    /// `acc(|A|<|B|) − acc(|B|<|A|)`.
    pub fn order_gap(&self) -> f64 {
        self.a_smaller - self.b_smaller
    }
}

pub fn accuracy(model: &dyn Predictor, data: &[SdInstance]) -> Result<f64, ToyError> {
    if data.is_empty() {
        return Err(ToyError::EmptyDataset);
    }
    let pred = model.predict(data)?;
    let hits = pred.iter().zip(data).filter(|(&p, d)| p == d.target).count();
    Ok(hits as f64 / data.len() as f64)
}

pub fn eval_sliced(model: &dyn Predictor, data: &[SdInstance]) -> Result<SlicedAccuracy, ToyError> {
    let pred = model.predict(data)?;
    let (mut hit, mut hit_a, mut hit_b, mut n_a, mut n_b) = (0, 0, 0, 0, 0);
    for (&p, d) in pred.iter().zip(data) {
        let ok = usize::from(p == d.target);
        hit += ok;
        if d.len_a < d.len_b {
            n_a += 1;
            hit_a += ok;
        } else if d.len_b < d.len_a {
            n_b += 1;
            hit_b += ok;
        }
    }
    if data.is_empty() {
        return Err(ToyError::EmptyDataset);
    }
    if n_a == 0 {
        return Err(ToyError::EmptySlice("|A| < |B|"));
    }
    if n_b == 0 {
        return Err(ToyError::EmptySlice("|B| < |A|"));
    }
    Ok(SlicedAccuracy {
        overall: hit as f64 / data.len() as f64,
        a_smaller: hit_a as f64 / n_a as f64,
        b_smaller: hit_b as f64 / n_b as f64,
        n_overall: data.len(),
        n_a_smaller: n_a,
        n_b_smaller: n_b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::set_disjointness::gen_sd_instance;

    struct Oracle;
    impl Predictor for Oracle {
        fn predict(&self, data: &[SdInstance]) -> Result<Vec<u32>, ToyError> {
            Ok(data.iter().map(|d| d.target).collect())
        }
    }

    struct Constant(u32);
    impl Predictor for Constant {
        fn predict(&self, data: &[SdInstance]) -> Result<Vec<u32>, ToyError> {
            Ok(vec![self.0; data.len()])
        }
    }

    fn mixed(n: usize, vocab: usize) -> Vec<SdInstance> {
        (0..n as u64)
            .map(|i| {
                let (a, b) = if i % 2 == 0 { (2, 5) } else { (5, 2) };
                gen_sd_instance(a, b, vocab, i).unwrap()
            })
            .collect()
    }

    #[test]
    fn oracle_and_constant_predictors() {
        let data = mixed(400, 36);
        let acc = eval_sliced(&Oracle, &data).unwrap();
        assert_eq!((acc.overall, acc.a_smaller, acc.b_smaller), (1.0, 1.0, 1.0));
        let acc = eval_sliced(&Constant(3), &data).unwrap();
        let chance = 1.0 / 16.0;
        for x in [acc.overall, acc.a_smaller, acc.b_smaller] {
            assert!((x - chance).abs() < 0.05, "{x}");
        }
    }

    #[test]
    fn slices_recombine_to_overall() {
        let mut data = mixed(50, 36);
        data.push(gen_sd_instance(3, 3, 36, 99).unwrap());
        struct Odd;
        impl Predictor for Odd {
            fn predict(&self, data: &[SdInstance]) -> Result<Vec<u32>, ToyError> {
                Ok(data.iter().enumerate().map(|(i, d)| if i % 3 == 0 { d.target } else { u32::MAX }).collect())
            }
        }
        let acc = eval_sliced(&Odd, &data).unwrap();
        let equal_sized = usize::from(Odd.predict(&data).unwrap()[50] == data[50].target) as f64;
        let weighted = (acc.a_smaller * acc.n_a_smaller as f64 + acc.b_smaller * acc.n_b_smaller as f64 + equal_sized) / 51.0;
        assert!((weighted - acc.overall).abs() < 1e-12);
    }

    #[test]
    fn empty_slices_are_errors() {
        let only_a: Vec<_> = (0..4).map(|s| gen_sd_instance(2, 5, 36, s).unwrap()).collect();
        assert_eq!(eval_sliced(&Oracle, &only_a).unwrap_err(), ToyError::EmptySlice("|B| < |A|"));
        assert_eq!(eval_sliced(&Oracle, &[]).unwrap_err(), ToyError::EmptyDataset);
    }

    fn tiny_run(epochs: usize, lr: f64) -> TrainRun {
        TrainRun { config: ToyConfig::new(16, 4, true, 20), optimizer: AdamW::new(lr), seed: 1, epochs, batch_size: 8 }
    }

    #[test]
    fn zero_epochs_is_near_chance() {
        let data: Vec<_> = (0..400).map(|s| gen_sd_instance(3, 3, 20, s).unwrap()).collect();
        let out = train::<f32>(&tiny_run(0, 1e-3), &data).unwrap();
        assert!(out.epoch_loss.is_empty());
        assert!(accuracy(&out.model, &data).unwrap() < 0.3);
        assert_eq!(train::<f32>(&tiny_run(1, 1e-3), &[]).unwrap_err(), ToyError::EmptyDataset);
    }

    #[test]
    fn memorizes_small_fixed_set() {
        let data: Vec<_> = (0..32).map(|s| gen_sd_instance(2, 3, 20, s).unwrap()).collect();
        let out = train::<f32>(&tiny_run(200, 1e-2), &data).unwrap();
        assert!(!out.diverged);
        let acc = accuracy(&out.model, &data).unwrap();
        assert!(acc >= 0.95, "{acc}");
    }

    #[test]
    fn training_is_deterministic() {
        let data: Vec<_> = (0..16).map(|s| gen_sd_instance(2, 3, 20, s).unwrap()).collect();
        let a = train::<f32>(&tiny_run(3, 1e-3), &data).unwrap();
        let b = train::<f32>(&tiny_run(3, 1e-3), &data).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.epoch_loss, b.epoch_loss);
    }

    #[test]
    fn huge_learning_rate_is_flagged() {
        let data: Vec<_> = (0..16).map(|s| gen_sd_instance(2, 3, 20, s).unwrap()).collect();
        let out = train::<f32>(&tiny_run(50, 1e30), &data).unwrap();
        assert!(out.diverged);
    }

    #[test]
    fn adam_matches_hand_computation() {
        let mut p = vec![Tensor::<f64>::new(&[1, 1], vec![1.0]).unwrap(), Tensor::new(&[1], vec![1.0]).unwrap()];
        let g = vec![Tensor::new(&[1, 1], vec![0.5]).unwrap(), Tensor::new(&[1], vec![0.5]).unwrap()];
        let opt = AdamW::new(0.1);
        AdamState::new(&p).update(&opt, &mut p, &g);
        // First step: m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps).
        let adam_step = 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((p[0].data()[0] - (1.0 * (1.0 - 0.1 * 0.1) - adam_step)).abs() < 1e-12);
        assert!((p[1].data()[0] - (1.0 - adam_step)).abs() < 1e-12);
    }
}
