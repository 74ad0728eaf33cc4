use pyo3::prelude::*;

use nestknn_py::nestknn_py;

const SCRIPT: &std::ffi::CStr = cr#"
import nestknn_py as nk

build, cal, hold = nk.synth_scenario(separation=6.0, n_per_class=300, seed=2, n_holdout=60)
db = nk.Database.build(build, samples_per_land=600, seed=2)
assert len(db) == 1200, len(db)

params, summary = nk.calibrate(db, cal, candidate_ks=[10, 25, 50, 100])
assert len(summary) == 6
k1, p1 = params.stage("snow", 1)
k2, _ = params.stage("snow", 2)
assert k2 * p1[1] < p1[0] * k1

det = nk.Detector(db, params)
out = det.retrieve_samples(hold)
a, b, c, d = nk.contingency([o.precipitating for o in out], [s.atmospheric_class != "clear" for s in hold])
assert nk.pod(a, b, c, d) >= 0.9, (a, b, c, d)
assert all((o.phase is None) == (not o.precipitating) for o in out)

idx = nk.SearchIndex(db, "snow", full=[[2.0 if i == j else 0.5 for j in range(13)] for i in range(13)])
y = hold[3].tb
assert [h[0] for h in idx.query(y, 10)] == [h[0] for h in idx.brute_force(y, 10)]

assert nk.hss(3, 6, 4, 8) == 0.0
assert nk.merge_ref_phase("liquid", 0.2) == "mixed"

try:
    nk.pod(0, 3, 0, 5)
    raise SystemExit("undefined pod accepted")
except nk.DataError:
    pass
try:
    nk.Params.from_text("snow.stage1.k = banana\n", 13)
    raise SystemExit("bad params accepted")
except nk.ConfigError:
    pass
"#;

#[test]
fn python_api_round_trip() {
    pyo3::append_to_inittab!(nestknn_py);
    Python::initialize();
    Python::attach(|py| {
        if let Err(e) = py.run(SCRIPT, None, None) {
            e.display(py);
            panic!("embedded script failed: {e}");
        }
    });
}
