//! CSV tables of sites and values.
//!
//! A field file has a header row; its leading `x`, `y` (and optionally `z`)
//! columns are coordinates and every remaining column is a variable.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::spatial::{LocationSet, MultiField};

/// Numeric table with column names.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub values: DMatrix<f64>,
}

pub fn read_table_from<R: Read>(reader: R) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let mut data = Vec::new();
    let mut rows = 0;
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        if record.len() != headers.len() {
            return Err(Error::InvalidInput(format!(
                "row {} has {} fields, header has {}",
                r + 1,
                record.len(),
                headers.len()
            )));
        }
        for (c, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                Error::InvalidInput(format!("row {}, column `{}`: `{field}` is not a number", r + 1, headers[c]))
            })?;
            data.push(v);
        }
        rows += 1;
    }
    Ok(Table {
        values: DMatrix::from_row_slice(rows, headers.len(), &data),
        headers,
    })
}

pub fn read_table(path: &Path) -> Result<Table> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    read_table_from(file)
}

pub fn write_table_to<W: Write>(writer: W, headers: &[String], values: &DMatrix<f64>) -> Result<()> {
    if headers.len() != values.ncols() {
        return Err(Error::Shape(format!("{} headers for {} columns", headers.len(), values.ncols())));
    }
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(headers)?;
    for row in values.row_iter() {
        wtr.write_record(row.iter().map(|v| v.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_table(path: &Path, headers: &[String], values: &DMatrix<f64>) -> Result<()> {
    write_table_to(std::fs::File::create(path)?, headers, values)
}

/// Number of leading coordinate columns (`x`, `y`, optional `z`).
pub fn coordinate_columns(headers: &[String]) -> Result<usize> {
    let names = ["x", "y", "z"];
    let d = headers
        .iter()
        .zip(names)
        .take_while(|(h, n)| h.eq_ignore_ascii_case(n))
        .count();
    if d < 2 {
        return Err(Error::InvalidInput(format!(
            "expected leading coordinate columns x,y[,z], found {:?}",
            &headers[..headers.len().min(3)]
        )));
    }
    Ok(d)
}

impl Table {
    /// Sites from the leading coordinate columns.
    pub fn locations(&self) -> Result<LocationSet> {
        let d = coordinate_columns(&self.headers)?;
        LocationSet::new(self.values.columns(0, d).into_owned())
    }

    /// Field from a table with coordinate columns and at least one variable.
    pub fn field(&self) -> Result<(MultiField, Vec<String>)> {
        let d = coordinate_columns(&self.headers)?;
        let p = self.headers.len() - d;
        if p == 0 {
            return Err(Error::InvalidInput("table has no variable columns".into()));
        }
        let locs = Arc::new(LocationSet::new(self.values.columns(0, d).into_owned())?);
        let field = MultiField::new(locs, self.values.columns(d, p).into_owned())?;
        Ok((field, self.headers[d..].to_vec()))
    }
}

/// Coordinate headers for `dim` dimensions.
pub fn coordinate_headers(dim: usize) -> Vec<String> {
    ["x", "y", "z"].iter().take(dim).map(|s| s.to_string()).collect()
}

/// Writes sites followed by value columns.
pub fn write_field(path: &Path, locs: &LocationSet, names: &[String], values: &DMatrix<f64>) -> Result<()> {
    if values.nrows() != locs.len() {
        return Err(Error::Shape(format!("{} rows for {} sites", values.nrows(), locs.len())));
    }
    let mut headers = coordinate_headers(locs.dim());
    headers.extend_from_slice(names);
    let mut table = DMatrix::zeros(locs.len(), headers.len());
    table.columns_mut(0, locs.dim()).copy_from(locs.coords());
    table.columns_mut(locs.dim(), values.ncols()).copy_from(values);
    write_table(path, &headers, &table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_field_with_coordinates() {
        let text = "x,y,a,b\n0,0,1.5,2\n1,0.5,-3,4e-1\n";
        let table = read_table_from(text.as_bytes()).unwrap();
        let (field, names) = table.field().unwrap();
        assert_eq!(names, vec!["a", "b"]);
        assert_eq!(field.n(), 2);
        assert_eq!(field.values()[(1, 1)], 0.4);
        assert_eq!(field.locations().point(1), vec![1.0, 0.5]);
    }

    #[test]
    fn rejects_bad_cells_and_missing_coordinates() {
        assert!(read_table_from("x,y,a\n0,0,oops\n".as_bytes()).is_err());
        let t = read_table_from("a,b\n1,2\n".as_bytes()).unwrap();
        assert!(t.locations().is_err());
    }

    #[test]
    fn write_read_round_trip() {
        let values = DMatrix::from_row_slice(2, 3, &[0.1, 1.0 / 3.0, -2e-300, 5.0, 1e20, 7.25]);
        let headers: Vec<String> = ["x", "y", "v"].iter().map(|s| s.to_string()).collect();
        let mut buf = Vec::new();
        write_table_to(&mut buf, &headers, &values).unwrap();
        let back = read_table_from(buf.as_slice()).unwrap();
        assert_eq!(back.values, values);
        assert_eq!(back.headers, headers);
    }
}
