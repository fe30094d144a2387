use std::ffi::CString;

use pyo3::prelude::*;
use pyo3::types::PyModule;

fn run(script: &str) -> PyResult<()> {
    Python::initialize();
    Python::attach(|py| {
        let m = PyModule::new(py, "pyjlu")?;
        pyjlu::pyjlu(&m)?;
        py.import("sys")?.getattr("modules")?.set_item("pyjlu", &m)?;
        let code = CString::new(script).unwrap();
        py.run(&code, None, None)
    })
}

const SPEC: &str = r#"
import json, pyjlu
spec = json.dumps({
    "input_dim": 5,
    "tasks": [
        {"name": "age", "classes": 3, "signal_scale": 2.0, "layout": {"kind": "ordinal"}},
        {"name": "gender", "classes": 2, "signal_scale": 1.2},
    ],
    "noise_sigma": 1.0,
    "train_joint": {"kind": "biased", "rho": [0.8]},
})
"#;

#[test]
fn datasets_and_training_round_trip() {
    let script = format!(
        "{SPEC}
train = pyjlu.Dataset.sample(spec, 120, 'train', 1)
test = pyjlu.Dataset.balanced_test(spec, 60, 2)
assert len(train) == 120 and train.primary_task == 'age'
cfg = pyjlu.TrainConfig(base_lr=0.01, epochs=1, seed=3)
assert pyjlu.TrainConfig.from_json(cfg.to_json()).seed == 3
net, hist = pyjlu.run_jlu(cfg, train, train, test, hidden=[6], embedding_dim=3)
assert len(hist) == 1 and len(net.embed(test)[0]) == 3
assert len(net.predict(test)) == 60
acc = pyjlu.bayes_oracle_accuracy(spec, 'age')
assert 0.3 < acc <= 1.0
"
    );
    run(&script).unwrap();
}

#[test]
fn bad_input_raises_value_error() {
    let script = format!(
        "{SPEC}
for call in (
    lambda: pyjlu.Dataset.sample('{{', 10, 'train', 0),
    lambda: pyjlu.Dataset.sample(spec, 10, 'sideways', 0),
    lambda: pyjlu.TrainConfig(base_lr=-1.0),
):
    try:
        call()
    except ValueError:
        pass
    else:
        raise AssertionError('expected ValueError')
"
    );
    run(&script).unwrap();
}
