// SPDX-License-Identifier: MIT OR Apache-2.0

use std::sync::OnceLock;

use mib_core::model::{train_toy_model, ModelConfig, TrainConfig, TransformerModel};
use mib_core::tasks::{gen_ioi, DatasetSplit, TaskId};

/// Two-layer, four-head IOI model trained to at least 95% validation accuracy.
pub fn toy_ioi() -> &'static (TransformerModel, DatasetSplit) {
    static CELL: OnceLock<(TransformerModel, DatasetSplit)> = OnceLock::new();
    CELL.get_or_init(|| {
        let data = gen_ioi(400, 0).unwrap();
        let cfg = ModelConfig::new(2, 4, 8, TaskId::Ioi.vocab().len(), data.train[0].tokens.len());
        let tc = TrainConfig {
            steps: 3000,
            batch_size: 16,
            lr: 3e-3,
            eval_every: 100,
            target_accuracy: Some(0.95),
            ..TrainConfig::default()
        };
        let (model, report) = train_toy_model(cfg, &data.train, &data.validation, &tc).unwrap();
        assert!(report.validation_accuracy >= 0.95);
        (model, data)
    })
}
