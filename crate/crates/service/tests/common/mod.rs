use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use rulechat_core::sharc::RawExample;
use rulechat_core::synthetic::bundled;
use rulechat_core::train::{fit_reader, RunConfig};
use rulechat_service::Engine;

pub fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// The bundled-corpus reader, trained once per test binary. Inquiries are raw spans.
pub fn engine() -> Arc<Engine> {
    static ENGINE: OnceLock<Arc<Engine>> = OnceLock::new();
    ENGINE
        .get_or_init(|| {
            let mut run = RunConfig::load(&workspace_root().join("configs/synthetic.toml")).unwrap();
            run.train.max_steps = 200;
            let data = bundled();
            let fitted = fit_reader(&data, &data, &run, None).unwrap();
            assert_eq!(fitted.outcome.best.report.micro_acc, 100.0);
            Arc::new(Engine::new(fitted.reader, None))
        })
        .clone()
}

/// Bundled records of the given gold class with an empty history.
pub fn fresh(kind: usize) -> Vec<RawExample> {
    bundled()
        .into_iter()
        .enumerate()
        .filter(|(i, e)| i % 4 == kind && e.history.is_empty())
        .map(|(_, e)| e)
        .collect()
}
