use rand::seq::SliceRandom;

use super::{sample_mask, MaeModel};
use crate::error::{Error, Result};
use crate::fc::{Cohort, Patch};
use crate::nn::{Graph, LrSchedule};
use crate::rng;

/// One row of the loss curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Mean pretraining loss over subjects in this epoch.
    pub loss: f64,
    /// Learning rate of the epoch (of its first batch with per-step schedules).
    pub lr: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub curve: Vec<EpochRecord>,
    pub warnings: Vec<String>,
}

/// `epoch,loss,lr` CSV text.
pub fn format_loss_curve(curve: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,loss,lr\n");
    for r in curve {
        out.push_str(&format!("{},{},{}\n", r.epoch, r.loss, r.lr));
    }
    out
}

/// Trains on every subject of `cohort` until the configured epoch count.
pub fn train(model: &mut MaeModel, cohort: &Cohort) -> Result<TrainReport> {
    let data = cohort
        .subjects()
        .iter()
        .map(|s| model.patches(&s.fc))
        .collect::<Result<Vec<_>>>()?;
    let epochs = model.config().epochs;
    train_until(model, &data, epochs, |_| {})
}

/// Continues training from `model.epochs_done()` up to epoch `until`,
/// calling `on_epoch` after each epoch.
///
/// Epoch `e` shuffles subjects and draws a fresh mask per subject from the
/// stream `(seed, EPOCH, e)`, so stopping and resuming reproduces an
/// uninterrupted run exactly.
pub fn train_until(
    model: &mut MaeModel,
    data: &[Vec<Patch>],
    until: usize,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::Data("cannot train on an empty cohort".into()));
    }
    let cfg = model.config().clone();
    if until > cfg.epochs {
        return Err(Error::InvalidArgument(format!(
            "cannot train to epoch {until}; the schedule has {} epochs",
            cfg.epochs
        )));
    }
    let schedule = LrSchedule::new(cfg.base_lr, cfg.warmup_epochs, cfg.epochs)?;
    let mut report = TrainReport::default();
    let mut batch = cfg.batch_size;
    if batch > data.len() {
        let msg = format!(
            "batch size {} exceeds cohort size {}; clamped to {}",
            batch,
            data.len(),
            data.len()
        );
        log::warn!("{msg}");
        report.warnings.push(msg);
        batch = data.len();
    }
    let n_batches = data.len().div_ceil(batch);
    let n_patch = model.layout().n_patch();

    for epoch in model.epochs_done..until {
        let mut rng = rng::stream(cfg.seed, rng::domain::EPOCH, epoch as u64);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut epoch_lr = None;
        for (b, chunk) in order.chunks(batch).enumerate() {
            let position = if cfg.per_step_schedule {
                epoch as f64 + (b as f64 + 0.5) / n_batches as f64
            } else {
                epoch as f64 + 0.5
            };
            let lr = schedule.lr_at_position(position)?;
            epoch_lr.get_or_insert(lr);
            model.store.zero_grad();
            for &s in chunk {
                let mask = sample_mask(n_patch, cfg.mask_ratio, &mut rng)?;
                let mut g = Graph::new();
                let (loss, _) = model.forward_graph(&mut g, &data[s], &data[s], &mask)?;
                let value = g.value(loss).data()[0];
                if !value.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss at epoch {} (subject {s})",
                        epoch + 1
                    )));
                }
                loss_sum += value;
                let scaled = g.scale(loss, 1.0 / chunk.len() as f64);
                g.backward(scaled, &mut model.store)?;
            }
            model.optimizer.step(&mut model.store, lr)?;
        }
        model.epochs_done = epoch + 1;
        let record = EpochRecord {
            epoch: epoch + 1,
            loss: loss_sum / data.len() as f64,
            lr: epoch_lr.unwrap_or(0.0),
        };
        on_epoch(&record);
        report.curve.push(record);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fc::{FcMatrix, Parcellation};
    use crate::mae::MaeConfig;
    use crate::nn::Tensor;
    use rand::Rng as _;

    fn toy_data(n: usize, seed: u64) -> Vec<FcMatrix> {
        let mut rng = rng::seeded(seed);
        (0..n)
            .map(|_| {
                let r = 12;
                let mut v = vec![0.0; r * r];
                for i in 0..r {
                    v[i * r + i] = 1.0;
                    for j in i + 1..r {
                        let base = if i / 4 == j / 4 { 0.5 } else { 0.0 };
                        let x: f64 = base + rng.gen_range(-0.1..0.1);
                        v[i * r + j] = x;
                        v[j * r + i] = x;
                    }
                }
                FcMatrix::new(r, v).unwrap()
            })
            .collect()
    }

    fn toy_model(cfg: MaeConfig) -> MaeModel {
        MaeModel::new(cfg, Parcellation::contiguous(&[4, 4, 4]).unwrap()).unwrap()
    }

    fn toy_cfg() -> MaeConfig {
        MaeConfig {
            embed_dim: 8,
            encoder_depth: 1,
            encoder_heads: 2,
            decoder_dim: 4,
            decoder_depth: 1,
            decoder_heads: 1,
            epochs: 6,
            warmup_epochs: 1,
            batch_size: 4,
            ..MaeConfig::desk()
        }
    }

    fn patches(model: &MaeModel, fcs: &[FcMatrix]) -> Vec<Vec<Patch>> {
        fcs.iter().map(|fc| model.patches(fc).unwrap()).collect()
    }

    fn values(model: &MaeModel) -> Vec<Tensor> {
        model.store().named_values().map(|(_, t)| t.clone()).collect()
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let mut model = toy_model(MaeConfig { base_lr: 0.0, ..toy_cfg() });
        let data = patches(&model, &toy_data(10, 1));
        let before = values(&model);
        let report = train_until(&mut model, &data, 6, |_| {}).unwrap();
        assert_eq!(report.curve.len(), 6);
        assert_eq!(values(&model), before);
    }

    #[test]
    fn identical_seeds_give_identical_curves() {
        let run = || {
            let mut model = toy_model(toy_cfg());
            let data = patches(&model, &toy_data(10, 2));
            let r = train_until(&mut model, &data, 6, |_| {}).unwrap();
            (r.curve, values(&model))
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let mut full = toy_model(toy_cfg());
        let data = patches(&full, &toy_data(9, 3));
        let curve = train_until(&mut full, &data, 6, |_| {}).unwrap().curve;

        let mut part = toy_model(toy_cfg());
        let mut first = train_until(&mut part, &data, 3, |_| {}).unwrap().curve;
        let mut resumed = part.clone();
        first.extend(train_until(&mut resumed, &data, 6, |_| {}).unwrap().curve);
        assert_eq!(first, curve);
        assert_eq!(values(&resumed), values(&full));
    }

    #[test]
    fn one_step_moves_every_group() {
        let mut model = toy_model(MaeConfig { batch_size: 10, ..toy_cfg() });
        let data = patches(&model, &toy_data(10, 4));
        let before = model.clone();
        // Epoch 2 sits past warmup, so its learning rate is nonzero.
        model.epochs_done = 1;
        train_until(&mut model, &data, 2, |_| {}).unwrap();
        for (group, ids) in model.param_groups() {
            let moved = ids
                .iter()
                .any(|&id| model.store().value(id) != before.store().value(id));
            assert!(moved, "group {group} unchanged");
        }
    }

    #[test]
    fn oversized_batch_is_clamped_with_warning() {
        let mut model = toy_model(MaeConfig { batch_size: 64, ..toy_cfg() });
        let data = patches(&model, &toy_data(5, 5));
        let report = train_until(&mut model, &data, 2, |_| {}).unwrap();
        assert_eq!(report.warnings.len(), 1);
        assert!(report.warnings[0].contains("clamped"));
        assert!(train_until(&mut model, &[], 3, |_| {}).is_err());
        assert!(train_until(&mut model, &data, 7, |_| {}).is_err());
    }

    #[test]
    fn loss_curve_csv() {
        let text = format_loss_curve(&[EpochRecord { epoch: 1, loss: 0.5, lr: 0.01 }]);
        assert_eq!(text, "epoch,loss,lr\n1,0.5,0.01\n");
    }
}
