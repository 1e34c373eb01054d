//! Training on high-contrast phantoms must drive the dice loss down within a
//! small iteration budget.

use gtvseg_core::phantom::{generate_phantom, PhantomSpec, SEPARABLE_DELTA_HU};
use gtvseg_core::preprocess::Scale;
use gtvseg_core::train::{prepare_case, train, TrainConfig};
use gtvseg_core::NetworkConfig;

#[test]
fn loss_decreases_on_separable_phantoms() {
    let cases: Vec<_> = (0..2)
        .map(|seed| {
            let spec = PhantomSpec {
                seed,
                gtv_delta_hu: SEPARABLE_DELTA_HU,
                ..Default::default()
            };
            let (v, m) = generate_phantom(&spec).unwrap();
            prepare_case(&v, &m, Scale::Middle).unwrap()
        })
        .collect();

    let net = NetworkConfig {
        base_channels: vec![4, 8, 16, 32],
        patch_shape: [8, 32, 32],
        ..Default::default()
    };
    let cfg = TrainConfig {
        lr0: 1e-3,
        batch_size: 2,
        total_iterations: 120,
        seed: 0,
        scale: Scale::Middle,
        ..Default::default()
    };

    let outcome = train(&cases, &net, &cfg).unwrap();
    assert_eq!(outcome.loss_log.len(), 120);
    assert!(outcome.loss_log.iter().all(|r| r.loss.is_finite()));

    let mean = |records: &[gtvseg_core::train::LossRecord]| {
        records.iter().map(|r| r.loss).sum::<f64>() / records.len() as f64
    };
    let head = mean(&outcome.loss_log[..30]);
    let tail = mean(&outcome.loss_log[90..]);
    assert!(
        tail < head,
        "loss failed to decrease: first 30 mean {:.4}, last 30 mean {:.4}",
        head,
        tail
    );
}
