#![no_main]

use libfuzzer_sys::fuzz_target;
use ltsa::cohort::CohortConfig;
use ltsa::model::ModelKind;
use ltsa::trainer::TrainConfig;
use ltsa_cli::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(rc) = RunConfig::parse(text) else { return };
    let _ = rc.cohort(CohortConfig::areds_like(10, 0));
    let _ = rc.train(TrainConfig::desk(ModelKind::Ltsa));
    let _ = rc.grid();
    let _ = rc.n_boot();
    let _ = rc.split();
});
