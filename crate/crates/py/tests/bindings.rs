use std::ffi::CString;

use pyo3::prelude::*;
use pyo3::types::PyDict;

/// Runs `code` in an embedded interpreter with the module importable as `saris`.
fn run_python(code: &str) -> PyResult<()> {
    Python::initialize();
    Python::attach(|py| {
        let module = pyo3::wrap_pymodule!(saris::saris)(py);
        py.import("sys")?.getattr("modules")?.set_item("saris", module)?;
        let globals = PyDict::new(py);
        py.run(&CString::new(code).unwrap(), Some(&globals), None)
    })
}

#[test]
fn kernels_round_trip_through_python() {
    run_python(
        "import saris\n\
         k = saris.Kernel('box3d1r')\n\
         assert (k.dims, k.radius, k.loads, k.coeffs, k.flops) == (3, 1, 27, 27, 53)\n\
         assert saris.Kernel.parse(k.serialize()).name == 'box3d1r'\n\
         assert saris.catalog()[-1] == 'j3d27pt'\n",
    )
    .unwrap();
}

#[test]
fn simulation_matches_the_reference_from_python() {
    run_python(
        "import saris\n\
         k = saris.Kernel('j2d5pt')\n\
         m = saris.simulate(k, 'saris', unroll=2, tile=16)\n\
         assert m.cycles > 0 and 0.0 < m.fpu_util <= 1.0\n\
         assert len(saris.reference(k, tile=16)) == 256\n\
         assert saris.listing(k, 'saris').startswith('# kernel j2d5pt variant saris')\n",
    )
    .unwrap();
}

#[test]
fn bad_arguments_raise_value_errors() {
    let err = run_python("import saris\nsaris.simulate(saris.Kernel('jacobi_2d'), 'vector')\n").unwrap_err();
    Python::attach(|py| assert!(err.is_instance_of::<pyo3::exceptions::PyValueError>(py)));
    let err = run_python("import saris\nsaris.Kernel('missing')\n").unwrap_err();
    Python::attach(|py| assert!(err.is_instance_of::<pyo3::exceptions::PyValueError>(py)));
}
