//! Legacy ASCII VTK unstructured-grid export of the leaf mesh with cell data
//! (saturation/pressure means, level, order, estimator) and corner-sampled
//! saturation as point data.

use std::io::Write;
use std::path::Path;

use twophase_core::adapt::EstimatorField;
use twophase_core::dgspace::DgFunction;

pub fn write_vtk(
    path: &Path,
    u: &DgFunction,
    estimator: Option<&EstimatorField>,
) -> std::io::Result<()> {
    let space = &u.space;
    let mesh = &space.mesh;
    let n = mesh.n_elements();
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);

    writeln!(w, "# vtk DataFile Version 3.0")?;
    writeln!(w, "two-phase flow snapshot")?;
    writeln!(w, "ASCII")?;
    writeln!(w, "DATASET UNSTRUCTURED_GRID")?;

    writeln!(w, "POINTS {} double", 4 * n)?;
    for e in 0..n {
        for corner in mesh.element(e).corners() {
            writeln!(w, "{:.9e} {:.9e} 0", corner[0], corner[1])?;
        }
    }
    writeln!(w, "CELLS {} {}", n, 5 * n)?;
    for e in 0..n {
        let base = 4 * e;
        writeln!(w, "4 {} {} {} {}", base, base + 1, base + 2, base + 3)?;
    }
    writeln!(w, "CELL_TYPES {n}")?;
    for _ in 0..n {
        writeln!(w, "9")?;
    }

    writeln!(w, "CELL_DATA {n}")?;
    write_cell_scalars(&mut w, "s_n_mean", n, |e| u.element_mean(e, 1))?;
    write_cell_scalars(&mut w, "p_mean", n, |e| u.element_mean(e, 0))?;
    write_cell_scalars(&mut w, "level", n, |e| mesh.element(e).level() as f64)?;
    write_cell_scalars(&mut w, "order", n, |e| space.order(e) as f64)?;
    if let Some(est) = estimator {
        write_cell_scalars(&mut w, "eta", n, |e| est.eta(e))?;
    }

    writeln!(w, "POINT_DATA {}", 4 * n)?;
    writeln!(w, "SCALARS s_n double 1")?;
    writeln!(w, "LOOKUP_TABLE default")?;
    let ref_corners = [[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]];
    for e in 0..n {
        for xi in ref_corners {
            writeln!(w, "{:.9e}", u.eval(e, 1, xi))?;
        }
    }
    w.flush()
}

fn write_cell_scalars<W: Write>(
    w: &mut W,
    name: &str,
    n: usize,
    f: impl Fn(usize) -> f64,
) -> std::io::Result<()> {
    writeln!(w, "SCALARS {name} double 1")?;
    writeln!(w, "LOOKUP_TABLE default")?;
    for e in 0..n {
        writeln!(w, "{:.9e}", f(e))?;
    }
    Ok(())
}
