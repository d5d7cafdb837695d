use std::ffi::CString;

use pyo3::prelude::*;
use pyo3::types::PyDict;

fn run(code: &str) {
    Python::attach(|py| {
        let m = pyo3::wrap_pymodule!(tclnet_py::tclnet_py)(py);
        let globals = PyDict::new(py);
        globals.set_item("t", m).unwrap();
        let src = CString::new(code).unwrap();
        if let Err(e) = py.run(&src, Some(&globals), None) {
            e.print(py);
            panic!("python snippet failed");
        }
    });
}

#[test]
fn tensors_and_errors() {
    run(r#"
x = t.Tensor([2, 3], [0.0, 1.0, 2.0, 3.0, 4.0, 5.0])
assert x.shape == [2, 3] and len(x) == 2 and x.at([1, 0]) == 3.0
try:
    t.Tensor([4], [1.0])
    raise SystemExit("accepted bad shape")
except ValueError:
    pass
try:
    x.at([2, 0])
    raise SystemExit("accepted bad index")
except IndexError:
    pass
"#);
}

#[test]
fn block_selection_and_attention() {
    run(r#"
assert t.n_positions(16, 8) == 14
r = t.Tensor([5, 1], [0.0, 3.0, 3.0, 0.0, 3.0])
mask, pos = t.block_binarize(r, block_height=2)
assert pos == (1, 0), pos
assert mask.tolist() == [1.0, 0.0, 0.0, 1.0, 1.0]
a = t.attention_weights(t.Tensor([2], [1.0, 1.0]), t.Tensor([2, 2], [2.0, 2.0, 5.0, 5.0]))
assert abs(a.tolist()[0] - 0.5) < 1e-12
"#);
}

#[test]
fn config_round_trip() {
    run(r#"
c = t.RunConfig()
assert c.n_learners == 2 and c.block_height == 3 and c.lr == 3e-4
d = c.replace({"seo": False, "epochs": 7})
assert d.seo is False and d.epochs == 7 and c.epochs == 150
assert t.RunConfig(d.to_toml()).to_toml() == d.to_toml()
try:
    c.replace({"nope": 1})
    raise SystemExit("accepted unknown key")
except ValueError:
    pass
"#);
}
