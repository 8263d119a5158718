//! Model configurations shared by the criterion benches.

use agglo_core::student::{StudentConfig, StudentKind};
use agglo_core::RunConfig;

/// Toy ViT and toy E-RADIO students at their bench resolutions.
pub fn students() -> Vec<(&'static str, StudentConfig, usize)> {
    let vit = StudentConfig::default();
    let eradio = StudentConfig { kind: StudentKind::Eradio, ..StudentConfig::default() };
    vec![("vit", vit.clone(), 32), ("vit", vit, 64), ("eradio", eradio.clone(), 64), ("eradio", eradio, 128)]
}

/// Two-teacher, two-rank run small enough to time a step in milliseconds.
pub fn small_run() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.teachers.truncate(2);
    for t in &mut cfg.teachers {
        t.per_rank_batch = Some(4);
    }
    cfg.student.vit.depth = 2;
    cfg.trainer.steps = 1_000_000;
    cfg
}
