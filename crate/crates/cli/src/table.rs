//! Strict CSV tables: exact headers, typed cells, errors naming the column.

use std::path::{Path, PathBuf};

use crate::error::CliError;

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

pub fn fmt_bool(b: bool) -> &'static str {
    if b { "1" } else { "0" }
}

pub struct Table {
    pub path: PathBuf,
    pub header: Vec<String>,
    /// Index into the accepted headers passed to [`Table::read`].
    pub variant: usize,
    pub rows: Vec<csv::StringRecord>,
}

impl Table {
    /// Reads `path`, requiring its header to equal one of `accepted`.
    pub fn read(path: &Path, accepted: &[&[&str]]) -> Result<Self, CliError> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(|e| csv_error(path, e))?;
        let found: Vec<String> = reader.headers().map_err(|e| csv_error(path, e))?.iter().map(str::to_string).collect();
        let Some(variant) = accepted.iter().position(|h| h.iter().eq(found.iter())) else {
            let expected = accepted[0];
            // first position where the header departs from the primary layout
            let i = (0..).find(|&i| expected.get(i).copied() != found.get(i).map(String::as_str)).expect("headers differ");
            let column = expected.get(i).map(|s| s.to_string()).or_else(|| found.get(i).cloned()).unwrap_or_default();
            let alts: Vec<String> = accepted.iter().map(|h| h.join(",")).collect();
            return Err(CliError::schema(
                path,
                &column,
                format!("header `{}` does not match `{}`", found.join(","), alts.join("` or `")),
            ));
        };
        let rows = reader.records().collect::<Result<Vec<_>, _>>().map_err(|e| csv_error(path, e))?;
        Ok(Self { path: path.to_path_buf(), header: found, variant, rows })
    }

    fn cell<'a>(&'a self, row: usize, col: usize) -> &'a str {
        self.rows[row].get(col).unwrap_or("")
    }

    fn bad(&self, row: usize, col: usize, what: &str) -> CliError {
        let value = self.cell(row, col);
        CliError::schema(&self.path, &self.header[col], format!("data row {}: cannot parse `{value}` as {what}", row + 1))
    }

    pub fn f64(&self, row: usize, col: usize) -> Result<f64, CliError> {
        self.cell(row, col).parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| self.bad(row, col, "a finite number"))
    }

    pub fn u64(&self, row: usize, col: usize) -> Result<u64, CliError> {
        self.cell(row, col).parse().map_err(|_| self.bad(row, col, "an unsigned integer"))
    }

    pub fn opt_u64(&self, row: usize, col: usize) -> Result<Option<u64>, CliError> {
        if self.cell(row, col).is_empty() { Ok(None) } else { self.u64(row, col).map(Some) }
    }

    pub fn opt_f64(&self, row: usize, col: usize) -> Result<Option<f64>, CliError> {
        if self.cell(row, col).is_empty() { Ok(None) } else { self.f64(row, col).map(Some) }
    }

    pub fn bool(&self, row: usize, col: usize) -> Result<bool, CliError> {
        match self.cell(row, col) {
            "1" | "true" => Ok(true),
            "0" | "false" => Ok(false),
            _ => Err(self.bad(row, col, "a flag (0/1)")),
        }
    }

    pub fn str(&self, row: usize, col: usize) -> &str {
        self.cell(row, col)
    }

    /// Column 0 must be a non-decreasing timestamp.
    pub fn times(&self) -> Result<Vec<f64>, CliError> {
        let mut out = Vec::with_capacity(self.rows.len());
        for r in 0..self.rows.len() {
            let t = self.f64(r, 0)?;
            if out.last().is_some_and(|prev| t < *prev) {
                return Err(CliError::schema(&self.path, &self.header[0], format!("data row {}: timestamps must be non-decreasing", r + 1)));
            }
            out.push(t);
        }
        Ok(out)
    }
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => CliError::Io { path: path.to_path_buf(), source },
        other => CliError::schema(path, "*", format!("{other:?}")),
    }
}

pub fn write_table<I, R>(path: &Path, header: &[&str], rows: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.write_record(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(CliError::io(path))
}
