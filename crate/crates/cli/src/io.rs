//! Long-format CSV for matrix series and JSON document helpers.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use matseg::transform::SCHEMA;
use matseg::MatrixSeries;
use nalgebra::DMatrix;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::CliError;

/// First line of every CSV we write: `# matseg/1 {config json}`.
pub fn csv_preamble(config: &RunConfig) -> String {
    format!("# {SCHEMA} {}\n", serde_json::to_string(config).expect("config serialises"))
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>, CliError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
        }
    }
    let f = std::fs::File::create(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(std::io::BufWriter::new(f))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Full-precision decimal rendering that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `t,row,col,value` rows (1-based) for every observation, starting at `t0 + 1`.
pub fn write_series(path: &Path, series: &[DMatrix<f64>], t0: usize, config: &RunConfig) -> Result<(), CliError> {
    let mut out = csv_preamble(config);
    out.push_str("t,row,col,value\n");
    for (t, m) in series.iter().enumerate() {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                out.push_str(&format!("{},{},{},{}\n", t0 + t + 1, i + 1, j + 1, fmt_f64(m[(i, j)])));
            }
        }
    }
    write_text(path, &out)
}

/// Reads a long-format matrix series. Rows may come in any order; every cell of
/// every time point must be present exactly once.
pub fn read_series(path: &Path) -> Result<Vec<DMatrix<f64>>, CliError> {
    let data = |msg: String| CliError::Data(format!("{}: {msg}", path.display()));
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| data(e.to_string()))?;
    let headers = rdr.headers().map_err(|e| data(e.to_string()))?.clone();
    let col_of = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| data(format!("missing column '{name}'")))
    };
    let (ct, cr, cc, cv) = (col_of("t")?, col_of("row")?, col_of("col")?, col_of("value")?);
    let mut cells: BTreeMap<(usize, usize, usize), f64> = BTreeMap::new();
    let (mut tmax, mut rmax, mut cmax) = (0, 0, 0);
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| data(e.to_string()))?;
        let idx = |c: usize, what: &str| -> Result<usize, CliError> {
            let v: usize = rec
                .get(c)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| data(format!("record {}: bad {what}", line + 1)))?;
            if v == 0 {
                return Err(data(format!("record {}: {what} indices are 1-based", line + 1)));
            }
            Ok(v)
        };
        let (t, r, c) = (idx(ct, "t")?, idx(cr, "row")?, idx(cc, "col")?);
        let v: f64 = rec
            .get(cv)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| data(format!("record {}: bad value", line + 1)))?;
        if !v.is_finite() {
            return Err(data(format!("record {}: non-finite value", line + 1)));
        }
        if cells.insert((t, r, c), v).is_some() {
            return Err(data(format!("duplicate cell t={t}, row={r}, col={c}")));
        }
        tmax = tmax.max(t);
        rmax = rmax.max(r);
        cmax = cmax.max(c);
    }
    if cells.is_empty() {
        return Err(data("no observations".into()));
    }
    if cells.len() != tmax * rmax * cmax {
        return Err(data(format!(
            "{} cells present, {} expected for T={tmax}, p={rmax}, q={cmax}",
            cells.len(),
            tmax * rmax * cmax
        )));
    }
    let mut out = vec![DMatrix::zeros(rmax, cmax); tmax];
    for ((t, r, c), v) in cells {
        out[t - 1][(r - 1, c - 1)] = v;
    }
    Ok(out)
}

pub fn read_matrix_series(path: &Path) -> Result<MatrixSeries, CliError> {
    Ok(MatrixSeries::new(read_series(path)?)?)
}

/// `{"schema", "config", <key>: payload}` pretty-printed with a trailing newline.
pub fn json_document<T: Serialize>(config: &RunConfig, key: &str, payload: &T) -> String {
    let mut doc = serde_json::Map::new();
    doc.insert("schema".into(), json!(SCHEMA));
    doc.insert("config".into(), serde_json::to_value(config).expect("config serialises"));
    doc.insert(key.into(), serde_json::to_value(payload).expect("payload serialises"));
    let mut s = serde_json::to_string_pretty(&Value::Object(doc)).expect("document serialises");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempdir();
        let path = dir.join("x.csv");
        let series = vec![
            DMatrix::from_row_slice(2, 3, &[0.1, -1.0 / 3.0, 1e-300, 2.5e10, -0.0, std::f64::consts::PI]),
            DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, f64::MIN_POSITIVE]),
        ];
        write_series(&path, &series, 0, &RunConfig::default()).unwrap();
        assert_eq!(read_series(&path).unwrap(), series);
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn rejects_missing_and_duplicate_cells() {
        let dir = tempdir();
        let path = dir.join("x.csv");
        std::fs::write(&path, "t,row,col,value\n1,1,1,0.5\n2,1,1,1.5\n2,1,2,1.0\n").unwrap();
        assert!(matches!(read_series(&path), Err(CliError::Data(_))));
        std::fs::write(&path, "t,row,col,value\n1,1,1,0.5\n1,1,1,1.5\n").unwrap();
        assert!(matches!(read_series(&path), Err(CliError::Data(_))));
        std::fs::write(&path, "value,col,row,t\n0.5,1,1,2\n1.5,1,1,1\n").unwrap();
        let s = read_series(&path).unwrap();
        assert_eq!(s[0][(0, 0)], 1.5);
        std::fs::remove_dir_all(dir).unwrap();
    }

    fn tempdir() -> std::path::PathBuf {
        use std::sync::atomic::{AtomicUsize, Ordering};
        static N: AtomicUsize = AtomicUsize::new(0);
        let d = std::env::temp_dir().join(format!("matseg-io-{}-{}", std::process::id(), N.fetch_add(1, Ordering::SeqCst)));
        std::fs::create_dir_all(&d).unwrap();
        d
    }
}
