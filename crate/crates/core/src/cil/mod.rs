//! Stage-wise training: stage 0, fine-tuning, independent learning and
//! output distillation against a frozen teacher.

mod loss;
mod train;

pub use loss::{
    combined_loss, distill_kld, distill_mse, loss_ft, loss_mse_masked, CombinedInputs, DistillKind, LossGrad, LossTerms,
};
pub use train::{
    predict_tracks, run_stages, train_stage, validation_f1, Clip, EpochLog, StageConfig, StageData, StageOutcome,
    TeacherHandle, TrainLog, Variant,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureTensor;
    use crate::net::{expand_head, init_model, ConvBlockConfig, ModelConfig};
    use crate::scene::{Direction, LabelEntry, LabelTrack};
    use rand::{Rng, SeedableRng};

    fn model_config() -> ModelConfig {
        ModelConfig {
            input_channels: 2,
            mel_bands: 8,
            conv_blocks: vec![ConvBlockConfig { filters: 4, pool_freq: 2, pool_time: 1 }],
            hidden_units: 8,
            temporal_context: 3,
            ..ModelConfig::default()
        }
    }

    /// Class `c` lights up band `2c` of channel 0 and tilts channel 1 by azimuth.
    fn clips(n: usize, classes: usize, seed: u64) -> Vec<Clip<f64>> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let label_frames = 10;
                let mut f = FeatureTensor::zeros(2, label_frames * 5, 8, 0.02);
                f.values.iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
                let mut labels = LabelTrack::empty(label_frames, 0.1);
                let c = rng.gen_range(0..classes);
                let az = rng.gen_range(-60.0..60.0);
                let (on, off) = (rng.gen_range(0..4), rng.gen_range(6..10));
                for lf in on..off {
                    labels.insert(lf, LabelEntry { class_id: c, direction: Direction::new(az, 0.0).unwrap() }).unwrap();
                    for t in lf * 5..(lf + 1) * 5 {
                        f.values[t * 8 + 2 * c] += 1.0;
                        f.values[(50 + t) * 8 + 2 * c] += az / 60.0;
                    }
                }
                Clip { features: f, labels }
            })
            .collect()
    }

    fn stage_cfg(variant: Variant) -> StageConfig {
        StageConfig {
            variant,
            epochs: 3,
            batch_size: 4,
            old_classes: vec![0, 1],
            new_classes: vec![2, 3],
            seed: 9,
            ..StageConfig::default()
        }
    }

    #[test]
    fn stage0_learns_above_chance() {
        let train = clips(40, 2, 1);
        let val = clips(10, 2, 2);
        let cfg = StageConfig {
            epochs: 25,
            batch_size: 4,
            new_classes: vec![0, 1],
            optimizer: crate::net::AdamConfig { learning_rate: 3e-3, ..Default::default() },
            ..StageConfig::default()
        };
        let init = init_model(&model_config(), 2, 3).unwrap();
        let start = validation_f1(&init, &val, &[0, 1], 0.5, &cfg.eval).unwrap();
        let (_, log) = train_stage(&cfg, &train, &val, init, None).unwrap();
        assert_eq!(log.epochs.len(), 25);
        assert!(log.epochs.iter().all(|e| e.loss.is_finite() && e.val_f1.is_finite()));
        assert!(log.epochs.last().unwrap().loss < log.epochs[0].loss);
        assert!(log.best_val_f1() > start.max(30.0), "start {start}, best {}", log.best_val_f1());
    }

    #[test]
    fn cil_at_zero_lambda_equals_indl() {
        let train = clips(12, 4, 4);
        let val = clips(4, 4, 5);
        let teacher = TeacherHandle::new(init_model::<f64>(&model_config(), 2, 6).unwrap());
        let init = expand_head(teacher.params(), 4, 7).unwrap();
        let (a, _) = train_stage(&stage_cfg(Variant::Indl), &train, &val, init.clone(), None).unwrap();
        let cfg = StageConfig { lambda: 0.0, ..stage_cfg(Variant::Cil) };
        let (b, _) = train_stage(&cfg, &train, &val, init.clone(), Some(&teacher)).unwrap();
        assert!(a.bit_eq(&b));
        let kld = StageConfig { distill_kind: DistillKind::Kld, ..cfg };
        let (c, _) = train_stage(&kld, &train, &val, init, Some(&teacher)).unwrap();
        assert!(a.bit_eq(&c));
    }

    #[test]
    fn teacher_is_left_untouched() {
        let train = clips(8, 4, 4);
        let val = clips(4, 4, 5);
        let teacher = TeacherHandle::new(init_model::<f64>(&model_config(), 2, 6).unwrap());
        let before = teacher.fingerprint();
        let init = expand_head(teacher.params(), 4, 7).unwrap();
        let (p, log) = train_stage(&stage_cfg(Variant::Cil), &train, &val, init.clone(), Some(&teacher)).unwrap();
        assert_eq!(teacher.params().fingerprint(), before);
        assert!(log.epochs.iter().all(|e| e.distill_term > 0.0 || e.epoch == 0));
        assert!(!p.bit_eq(&init));
    }

    #[test]
    fn variant_teacher_consistency() {
        let train = clips(4, 4, 4);
        let teacher = TeacherHandle::new(init_model::<f64>(&model_config(), 2, 6).unwrap());
        let init = expand_head(teacher.params(), 4, 7).unwrap();
        assert!(train_stage(&stage_cfg(Variant::Cil), &train, &train, init.clone(), None).is_err());
        let s0 = StageConfig { old_classes: vec![], new_classes: vec![0, 1, 2, 3], ..stage_cfg(Variant::Stage0) };
        assert!(train_stage(&s0, &train, &train, init.clone(), Some(&teacher)).is_err());
        let gapped = StageConfig { new_classes: vec![3, 4], ..stage_cfg(Variant::Ft) };
        assert!(train_stage(&gapped, &train, &train, init, None).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let train = clips(8, 4, 4);
        let val = clips(4, 4, 5);
        let init = init_model::<f64>(&model_config(), 4, 1).unwrap();
        let cfg = StageConfig { ..stage_cfg(Variant::Ft) };
        let (a, la) = train_stage(&cfg, &train, &val, init.clone(), None).unwrap();
        let (b, lb) = train_stage(&cfg, &train, &val, init, None).unwrap();
        assert!(a.bit_eq(&b));
        assert_eq!(la, lb);
    }

    #[test]
    fn log_csv_has_header_and_rows() {
        let log = TrainLog {
            epochs: vec![EpochLog { epoch: 1, loss: 0.5, mse_term: 0.5, distill_term: 0.0, val_f1: 12.5 }],
            best_epoch: 1,
        };
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "epoch,loss,mse_term,distill_term,val_f1\n1,0.5,0.5,0,12.5\n");
    }

    #[test]
    fn run_stages_expands_and_distills() {
        let all = clips(12, 4, 11);
        let stage0: Vec<Clip<f64>> = all.iter().filter(|c| c.labels.classes().iter().all(|&k| k < 2)).cloned().collect();
        let stage1: Vec<Clip<f64>> = all.iter().filter(|c| c.labels.classes().iter().all(|&k| k >= 2)).cloned().collect();
        let base = StageConfig { epochs: 2, batch_size: 4, ..StageConfig::default() };
        let inc = StageConfig { epochs: 2, ..stage_cfg(Variant::Cil) };
        let data = [StageData { train: &stage0, val: &stage0 }, StageData { train: &stage1, val: &stage1 }];
        let out = run_stages(&[vec![0, 1], vec![2, 3]], &data, init_model(&model_config(), 2, 1).unwrap(), &base, &inc).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[1].params.head.rows(), 12);
    }
}
