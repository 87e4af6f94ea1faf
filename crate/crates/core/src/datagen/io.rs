use std::fs;
use std::path::Path;

use super::{BlockLabel, Dataset};
use crate::error::{FsrmError, Result};
use crate::numcore::Matrix;

const OPTIONAL: [&str; 4] = ["ycf", "mu0", "mu1", "e0"];

/// Reads the dataset CSV: header `x0..x{d-1},t,yf[,ycf,mu0,mu1,e0]`, with an
/// optional `#` line of comma-separated block labels aligned to the x columns.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_dataset(&text, &path.display().to_string())
}

pub(crate) fn parse_dataset(text: &str, source: &str) -> Result<Dataset> {
    let mut label_line = None;
    let mut body = String::with_capacity(text.len());
    for line in text.lines() {
        match line.trim_start().strip_prefix('#') {
            Some(rest) => {
                let tags: std::result::Result<Vec<BlockLabel>, _> = rest
                    .split(',')
                    .map(|s| s.trim().parse::<BlockLabel>())
                    .collect();
                if let Ok(tags) = tags {
                    label_line = Some(tags);
                }
            }
            None => {
                body.push_str(line);
                body.push('\n');
            }
        }
    }

    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(body.as_bytes());
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let find = |name: &str| header.iter().position(|h| h == name);

    let mut x_cols = Vec::new();
    while let Some(pos) = find(&format!("x{}", x_cols.len())) {
        x_cols.push(pos);
    }
    let t_col = find("t")
        .ok_or_else(|| FsrmError::parse(format!("{source}: header"), "missing column `t`"))?;
    let yf_col = find("yf")
        .ok_or_else(|| FsrmError::parse(format!("{source}: header"), "missing column `yf`"))?;
    if x_cols.is_empty() {
        return Err(FsrmError::parse(
            format!("{source}: header"),
            "missing covariate column `x0`",
        ));
    }
    for h in &header {
        let known = h == "t" || h == "yf" || OPTIONAL.contains(&h.as_str());
        if !known && !h.starts_with('x') {
            return Err(FsrmError::parse(
                format!("{source}: header"),
                format!("unknown column `{h}`"),
            ));
        }
        if h.starts_with('x') && !x_cols.iter().any(|&p| &header[p] == h) {
            return Err(FsrmError::parse(
                format!("{source}: header"),
                format!("covariate column `{h}` out of sequence"),
            ));
        }
    }
    let opt_cols: Vec<Option<usize>> = OPTIONAL.iter().map(|n| find(n)).collect();

    let d = x_cols.len();
    let mut x = Vec::new();
    let mut t = Vec::new();
    let mut y_f = Vec::new();
    let mut opt: Vec<Vec<f64>> = vec![Vec::new(); OPTIONAL.len()];
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 1;
        let rec =
            rec.map_err(|e| FsrmError::parse(format!("{source}: row {row}"), e.to_string()))?;
        if rec.len() != header.len() {
            return Err(FsrmError::parse(
                format!("{source}: row {row}"),
                format!("expected {} fields, found {}", header.len(), rec.len()),
            ));
        }
        let real = |col: usize| -> Result<f64> {
            let v: f64 = rec[col].parse().map_err(|_| {
                FsrmError::parse(
                    format!("{source}: row {row}, column {}", header[col]),
                    format!("not a number: `{}`", &rec[col]),
                )
            })?;
            if !v.is_finite() {
                return Err(FsrmError::parse(
                    format!("{source}: row {row}, column {}", header[col]),
                    "non-finite value",
                ));
            }
            Ok(v)
        };
        for &c in &x_cols {
            x.push(real(c)?);
        }
        t.push(match &rec[t_col] {
            "0" => false,
            "1" => true,
            other => {
                return Err(FsrmError::parse(
                    format!("{source}: row {row}, column t"),
                    format!("treatment must be 0 or 1, got `{other}`"),
                ))
            }
        });
        y_f.push(real(yf_col)?);
        for (k, col) in opt_cols.iter().enumerate() {
            if let Some(c) = col {
                opt[k].push(real(*c)?);
            }
        }
    }

    let n = t.len();
    let mut opt = opt.into_iter().zip(&opt_cols).map(|(v, c)| c.map(|_| v));
    let ds = Dataset {
        x: Matrix::from_vec(n, d, x)?,
        t,
        y_f,
        y_cf: opt.next().flatten(),
        mu0: opt.next().flatten(),
        mu1: opt.next().flatten(),
        e0: opt.next().flatten(),
        block_labels: label_line,
    };
    ds.validate()
        .map_err(|e| FsrmError::parse(source.to_owned(), e.to_string()))?;
    Ok(ds)
}

/// Writes `ds` in the format accepted by [`read_dataset`]. Reals use the
/// shortest representation that round-trips exactly.
pub fn write_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, format_dataset(ds)?)?;
    Ok(())
}

pub(crate) fn format_dataset(ds: &Dataset) -> Result<String> {
    ds.validate()?;
    let mut out = String::new();
    if let Some(labels) = &ds.block_labels {
        let tags: Vec<&str> = labels.iter().map(|l| l.as_str()).collect();
        out.push('#');
        out.push_str(&tags.join(","));
        out.push('\n');
    }
    let optional: Vec<(&str, &Vec<f64>)> = [&ds.y_cf, &ds.mu0, &ds.mu1, &ds.e0]
        .into_iter()
        .zip(OPTIONAL)
        .filter_map(|(col, name)| col.as_ref().map(|v| (name, v)))
        .collect();

    let mut wtr = csv::WriterBuilder::new().from_writer(Vec::new());
    let mut header: Vec<String> = (0..ds.d()).map(|j| format!("x{j}")).collect();
    header.push("t".into());
    header.push("yf".into());
    header.extend(optional.iter().map(|(n, _)| n.to_string()));
    wtr.write_record(&header)?;
    for i in 0..ds.n() {
        let mut rec: Vec<String> = ds.x.row(i).iter().map(|v| v.to_string()).collect();
        rec.push(if ds.t[i] { "1" } else { "0" }.into());
        rec.push(ds.y_f[i].to_string());
        rec.extend(optional.iter().map(|(_, v)| v[i].to_string()));
        wtr.write_record(&rec)?;
    }
    let bytes = wtr
        .into_inner()
        .map_err(|e| FsrmError::Io(e.into_error()))?;
    out.push_str(&String::from_utf8(bytes).expect("csv output is utf-8"));
    Ok(out)
}
