use pyo3::prelude::*;
#[pymodule]
fn deephedge_py(_m: &Bound<'_, PyModule>) -> PyResult<()> { Ok(()) }
