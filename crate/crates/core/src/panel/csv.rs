//! Wide CSV layout, one row per period.
//!
//! Columns: `t`, `y`, donors `w1..wN`, surrogates `x1..xH`, proxies
//! `z0_1..`, `z1_1..`, and optional covariates `cy_k`, `cw_<unit>_<k>`,
//! `cx_<unit>_<k>`. Column order in the file is free; the treatment date is
//! not stored and must be supplied through [`PanelSchema`].

use super::{Covariates, Panel, PanelDims, PanelError, UnitCovariates};
use nalgebra::{DMatrix, DVector};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

/// What the reader expects from a file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PanelSchema {
    /// Last pre-intervention period (1-based).
    pub t0: usize,
    /// Exact block sizes; `None` infers them from the header.
    pub dims: Option<PanelDims>,
}

impl PanelSchema {
    pub fn infer(t0: usize) -> Self {
        Self { t0, dims: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Col {
    Time,
    Y,
    W(usize),
    X(usize),
    Z0(usize),
    Z1(usize),
    Cy(usize),
    Cw(usize, usize),
    Cx(usize, usize),
}

fn index(s: &str) -> Option<usize> {
    if s.is_empty() || s.starts_with('0') || !s.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    s.parse().ok().filter(|&n| n >= 1)
}

fn pair(s: &str) -> Option<(usize, usize)> {
    let (a, b) = s.split_once('_')?;
    Some((index(a)?, index(b)?))
}

fn classify(name: &str) -> Option<Col> {
    Some(match name {
        "t" => Col::Time,
        "y" => Col::Y,
        _ => {
            if let Some(r) = name.strip_prefix("z0_") {
                Col::Z0(index(r)?)
            } else if let Some(r) = name.strip_prefix("z1_") {
                Col::Z1(index(r)?)
            } else if let Some(r) = name.strip_prefix("cy_") {
                Col::Cy(index(r)?)
            } else if let Some(r) = name.strip_prefix("cw_") {
                let (i, k) = pair(r)?;
                Col::Cw(i, k)
            } else if let Some(r) = name.strip_prefix("cx_") {
                let (i, k) = pair(r)?;
                Col::Cx(i, k)
            } else if let Some(r) = name.strip_prefix('w') {
                Col::W(index(r)?)
            } else {
                Col::X(index(name.strip_prefix('x')?)?)
            }
        }
    })
}

fn name_of(col: Col) -> String {
    match col {
        Col::Time => "t".into(),
        Col::Y => "y".into(),
        Col::W(i) => format!("w{i}"),
        Col::X(i) => format!("x{i}"),
        Col::Z0(i) => format!("z0_{i}"),
        Col::Z1(i) => format!("z1_{i}"),
        Col::Cy(k) => format!("cy_{k}"),
        Col::Cw(i, k) => format!("cw_{i}_{k}"),
        Col::Cx(i, k) => format!("cx_{i}_{k}"),
    }
}

fn canonical_columns(d: &PanelDims) -> Vec<Col> {
    let mut cols = vec![Col::Time, Col::Y];
    cols.extend((1..=d.donors).map(Col::W));
    cols.extend((1..=d.surrogates).map(Col::X));
    cols.extend((1..=d.donor_proxies).map(Col::Z0));
    cols.extend((1..=d.surrogate_proxies).map(Col::Z1));
    cols.extend((1..=d.cy).map(Col::Cy));
    for i in 1..=d.donors {
        cols.extend((1..=d.cw).map(|k| Col::Cw(i, k)));
    }
    for i in 1..=d.surrogates {
        cols.extend((1..=d.cx).map(|k| Col::Cx(i, k)));
    }
    cols
}

/// Largest index present for a block, used when inferring dims.
fn infer_dims(cols: &[Col]) -> PanelDims {
    let mut d = PanelDims {
        donors: 0,
        surrogates: 0,
        donor_proxies: 0,
        surrogate_proxies: 0,
        cy: 0,
        cw: 0,
        cx: 0,
    };
    for c in cols {
        match *c {
            Col::W(i) => d.donors = d.donors.max(i),
            Col::X(i) => d.surrogates = d.surrogates.max(i),
            Col::Z0(i) => d.donor_proxies = d.donor_proxies.max(i),
            Col::Z1(i) => d.surrogate_proxies = d.surrogate_proxies.max(i),
            Col::Cy(k) => d.cy = d.cy.max(k),
            Col::Cw(_, k) => d.cw = d.cw.max(k),
            Col::Cx(_, k) => d.cx = d.cx.max(k),
            Col::Time | Col::Y => {}
        }
    }
    d
}

/// Parses a panel from any reader.
pub fn read_panel<R: Read>(reader: R, schema: &PanelSchema) -> Result<Panel, PanelError> {
    let mut rdr = ::csv::ReaderBuilder::new().trim(::csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut position: HashMap<Col, usize> = HashMap::new();
    let mut cols = Vec::with_capacity(headers.len());
    for (j, name) in headers.iter().enumerate() {
        let col = classify(name).ok_or_else(|| PanelError::UnknownColumn(name.to_string()))?;
        if position.insert(col, j).is_some() {
            return Err(PanelError::DuplicateColumn(name.to_string()));
        }
        cols.push(col);
    }
    let dims = schema.dims.unwrap_or_else(|| infer_dims(&cols));
    let expected = canonical_columns(&dims);
    for col in &expected {
        if !position.contains_key(col) {
            return Err(PanelError::MissingColumn(name_of(*col)));
        }
    }
    if let Some(extra) = cols.iter().find(|c| !expected.contains(c)) {
        return Err(PanelError::UnknownColumn(name_of(*extra)));
    }

    // Column-major buffers, one per canonical column.
    let mut data: Vec<Vec<f64>> = vec![Vec::new(); expected.len()];
    let slots: Vec<usize> = expected.iter().map(|c| position[c]).collect();
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let line = r + 2;
        let period = r + 1;
        let t_raw = record.get(position[&Col::Time]).unwrap_or("");
        if t_raw.parse::<usize>().ok() != Some(period) {
            return Err(PanelError::BadTimeIndex { line, expected: period, found: t_raw.to_string() });
        }
        for (k, (&slot, col)) in slots.iter().zip(&expected).enumerate().skip(1) {
            let raw = record.get(slot).unwrap_or("");
            let v: f64 = raw.parse().map_err(|_| PanelError::Parse {
                line,
                col: name_of(*col),
                value: raw.to_string(),
            })?;
            if !v.is_finite() {
                return Err(PanelError::NonFiniteValue { row: period, col: name_of(*col) });
            }
            data[k].push(v);
        }
    }
    let periods = data[1].len();
    if !(schema.t0 > 1 && schema.t0 < periods) {
        return Err(PanelError::BadT0 { t0: schema.t0, periods });
    }

    let lookup: HashMap<Col, usize> = expected.iter().enumerate().map(|(k, c)| (*c, k)).collect();
    let block = |n: usize, make: &dyn Fn(usize) -> Col| {
        DMatrix::from_fn(periods, n, |t, j| data[lookup[&make(j + 1)]][t])
    };
    let y = DVector::from_vec(data[lookup[&Col::Y]].clone());
    let w = block(dims.donors, &Col::W);
    let x = block(dims.surrogates, &Col::X);
    let z0 = block(dims.donor_proxies, &Col::Z0);
    let z1 = block(dims.surrogate_proxies, &Col::Z1);
    let covariates = Covariates {
        cy: (dims.cy > 0).then(|| block(dims.cy, &Col::Cy)),
        cw: (dims.cw > 0).then(|| {
            UnitCovariates::from_fn(periods, dims.donors, dims.cw, |t, i, k| data[lookup[&Col::Cw(i + 1, k + 1)]][t])
        }),
        cx: (dims.cx > 0).then(|| {
            UnitCovariates::from_fn(periods, dims.surrogates, dims.cx, |t, i, k| {
                data[lookup[&Col::Cx(i + 1, k + 1)]][t]
            })
        }),
    };
    Panel::with_covariates(schema.t0, y, w, x, z0, z1, covariates)
}

/// Reads and validates a panel CSV.
pub fn load_panel(path: impl AsRef<Path>, schema: &PanelSchema) -> Result<Panel, PanelError> {
    let file = std::fs::File::open(path)?;
    read_panel(std::io::BufReader::new(file), schema)
}

fn fmt_value(v: f64) -> String {
    // 17 significant digits round-trip every f64 exactly.
    format!("{v:.16e}")
}

fn value_of(panel: &Panel, col: Col, t: usize) -> f64 {
    match col {
        Col::Time => (t + 1) as f64,
        Col::Y => panel.y[t],
        Col::W(i) => panel.w[(t, i - 1)],
        Col::X(i) => panel.x[(t, i - 1)],
        Col::Z0(i) => panel.z0[(t, i - 1)],
        Col::Z1(i) => panel.z1[(t, i - 1)],
        Col::Cy(k) => panel.cy.as_ref().map_or(f64::NAN, |c| c[(t, k - 1)]),
        Col::Cw(i, k) => panel.cw.as_ref().map_or(f64::NAN, |c| c.get(t, i - 1, k - 1)),
        Col::Cx(i, k) => panel.cx.as_ref().map_or(f64::NAN, |c| c.get(t, i - 1, k - 1)),
    }
}

/// Serialises a panel to any writer in canonical column order.
pub fn write_panel<W: Write>(panel: &Panel, writer: W) -> Result<(), PanelError> {
    let cols = canonical_columns(&panel.dims());
    let mut wtr = ::csv::Writer::from_writer(writer);
    wtr.write_record(cols.iter().map(|c| name_of(*c)))?;
    for t in 0..panel.periods() {
        let row = cols.iter().map(|&c| match c {
            Col::Time => (t + 1).to_string(),
            _ => fmt_value(value_of(panel, c, t)),
        });
        wtr.write_record(row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Writes a panel CSV at full precision.
pub fn save_panel(panel: &Panel, path: impl AsRef<Path>) -> Result<(), PanelError> {
    let file = std::fs::File::create(path)?;
    write_panel(panel, std::io::BufWriter::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "t,y,w1,x1,z0_1,z1_1
1,1.0,0.5,0.1,0.4,0.2
2,1.5,0.7,0.2,0.6,0.1
3,0.9,0.4,0.3,0.5,0.3
4,2.1,0.8,1.1,0.7,0.9
5,2.4,0.9,1.3,0.8,1.2
6,2.2,0.6,1.0,0.6,1.1
";

    #[test]
    fn minimal_file_loads() {
        let p = read_panel(MINIMAL.as_bytes(), &PanelSchema::infer(3)).unwrap();
        assert_eq!((p.periods(), p.t0()), (6, 3));
        assert_eq!(p.dims().donors, 1);
        assert_eq!(p.x()[(4, 0)], 1.3);
    }

    #[test]
    fn nan_cell_rejected() {
        let bad = MINIMAL.replace("0.9,1.3", "NaN,1.3");
        let err = read_panel(bad.as_bytes(), &PanelSchema::infer(3)).unwrap_err();
        assert!(matches!(err, PanelError::NonFiniteValue { row: 5, ref col } if col == "w1"), "{err}");
    }

    #[test]
    fn missing_column_reported() {
        let dims = PanelDims {
            donors: 2,
            surrogates: 1,
            donor_proxies: 1,
            surrogate_proxies: 1,
            cy: 0,
            cw: 0,
            cx: 0,
        };
        let err = read_panel(MINIMAL.as_bytes(), &PanelSchema { t0: 3, dims: Some(dims) }).unwrap_err();
        assert!(matches!(err, PanelError::MissingColumn(ref c) if c == "w2"));

        let gap = MINIMAL.replace("t,y,w1,", "t,y,w2,");
        let err = read_panel(gap.as_bytes(), &PanelSchema::infer(3)).unwrap_err();
        assert!(matches!(err, PanelError::MissingColumn(ref c) if c == "w1"));
    }

    #[test]
    fn bad_t0_and_time_index() {
        let err = read_panel(MINIMAL.as_bytes(), &PanelSchema::infer(6)).unwrap_err();
        assert!(matches!(err, PanelError::BadT0 { t0: 6, periods: 6 }));
        let shuffled = MINIMAL.replace("\n3,", "\n7,");
        let err = read_panel(shuffled.as_bytes(), &PanelSchema::infer(3)).unwrap_err();
        assert!(matches!(err, PanelError::BadTimeIndex { expected: 3, .. }));
    }

    #[test]
    fn ragged_row_is_an_error() {
        let ragged = MINIMAL.replace("2,1.5,0.7,0.2,0.6,0.1", "2,1.5,0.7,0.2,0.6");
        assert!(read_panel(ragged.as_bytes(), &PanelSchema::infer(3)).is_err());
    }

    #[test]
    fn unknown_column_rejected() {
        let extra = MINIMAL.replacen("z1_1\n", "z1_1,q\n", 1);
        assert!(read_panel(extra.as_bytes(), &PanelSchema::infer(3)).is_err());
    }

    #[test]
    fn write_emits_header_and_rows() {
        let p = read_panel(MINIMAL.as_bytes(), &PanelSchema::infer(3)).unwrap();
        let mut buf = Vec::new();
        write_panel(&p, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 7);
        assert_eq!(text.lines().next().unwrap(), "t,y,w1,x1,z0_1,z1_1");
        assert!(!text.contains("cy_") && !text.contains("cw_") && !text.contains("cx_"));
        let back = read_panel(text.as_bytes(), &PanelSchema::infer(3)).unwrap();
        assert_eq!(back, p);
    }
}
