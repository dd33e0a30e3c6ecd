//! Writers for CSV tables, `.vtu` field files and the run manifest.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use tdbem_core::mesh::Vec3;

/// Writes a comma-separated table with a header row.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> io::Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        debug_assert_eq!(row.len(), header.len());
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()
}

/// Point set of a `.vtu` file: structured slices become quad cells,
/// anything else vertex cells.
pub struct VtuGrid<'a> {
    pub points: &'a [Vec3],
    pub dims: Option<(usize, usize)>,
}

/// VTK XML unstructured grid, ASCII, one point data array `u_total`.
pub fn write_vtu<W: Write>(mut w: W, grid: &VtuGrid, values: &[f64], time: f64) -> io::Result<()> {
    assert_eq!(grid.points.len(), values.len(), "one value per point");
    let mut cells: Vec<Vec<usize>> = Vec::new();
    let cell_type = match grid.dims {
        Some((nu, nv)) => {
            assert_eq!(nu * nv, grid.points.len(), "slice dimensions");
            for j in 0..nv - 1 {
                for i in 0..nu - 1 {
                    let a = j * nu + i;
                    cells.push(vec![a, a + 1, a + 1 + nu, a + nu]);
                }
            }
            9
        }
        None => {
            cells.extend((0..grid.points.len()).map(|i| vec![i]));
            1
        }
    };
    writeln!(w, r#"<?xml version="1.0"?>"#)?;
    writeln!(
        w,
        r#"<VTKFile type="UnstructuredGrid" version="0.1" byte_order="LittleEndian">"#
    )?;
    writeln!(w, "  <UnstructuredGrid>")?;
    writeln!(w, r#"    <FieldData>"#)?;
    writeln!(
        w,
        r#"      <DataArray type="Float64" Name="TimeValue" NumberOfTuples="1" format="ascii">{time:e}</DataArray>"#
    )?;
    writeln!(w, r#"    </FieldData>"#)?;
    writeln!(
        w,
        r#"    <Piece NumberOfPoints="{}" NumberOfCells="{}">"#,
        grid.points.len(),
        cells.len()
    )?;
    writeln!(w, r#"      <PointData Scalars="u_total">"#)?;
    writeln!(w, r#"        <DataArray type="Float64" Name="u_total" format="ascii">"#)?;
    for v in values {
        writeln!(w, "          {v:.12e}")?;
    }
    writeln!(w, "        </DataArray>")?;
    writeln!(w, "      </PointData>")?;
    writeln!(w, "      <Points>")?;
    writeln!(
        w,
        r#"        <DataArray type="Float64" NumberOfComponents="3" format="ascii">"#
    )?;
    for p in grid.points {
        writeln!(w, "          {:.12e} {:.12e} {:.12e}", p.x, p.y, p.z)?;
    }
    writeln!(w, "        </DataArray>")?;
    writeln!(w, "      </Points>")?;
    writeln!(w, "      <Cells>")?;
    writeln!(w, r#"        <DataArray type="Int64" Name="connectivity" format="ascii">"#)?;
    for c in &cells {
        let s: Vec<String> = c.iter().map(|i| i.to_string()).collect();
        writeln!(w, "          {}", s.join(" "))?;
    }
    writeln!(w, "        </DataArray>")?;
    writeln!(w, r#"        <DataArray type="Int64" Name="offsets" format="ascii">"#)?;
    let mut off = 0;
    for c in &cells {
        off += c.len();
        writeln!(w, "          {off}")?;
    }
    writeln!(w, "        </DataArray>")?;
    writeln!(w, r#"        <DataArray type="UInt8" Name="types" format="ascii">"#)?;
    for _ in &cells {
        writeln!(w, "          {cell_type}")?;
    }
    writeln!(w, "        </DataArray>")?;
    writeln!(w, "      </Cells>")?;
    writeln!(w, "    </Piece>")?;
    writeln!(w, "  </UnstructuredGrid>")?;
    writeln!(w, "</VTKFile>")?;
    Ok(())
}

/// `manifest.txt`: resolved configuration followed by version lines.
pub fn write_manifest(dir: &Path, resolved: &str) -> io::Result<()> {
    let mut s = String::from(resolved);
    s.push_str(&format!("version.tdbem = {}\n", env!("CARGO_PKG_VERSION")));
    s.push_str(&format!(
        "version.target = {}-{}\n",
        std::env::consts::ARCH,
        std::env::consts::OS
    ));
    fs::write(dir.join("manifest.txt"), s)
}
