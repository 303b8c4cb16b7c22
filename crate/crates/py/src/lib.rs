use pyo3::prelude::*;

#[pymodule]
fn rdnet(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
