//! CSV output schema.
//!
//! Every output file starts with a schema line, then a header row, then one
//! row per record. UTF-8, comma-separated, LF line endings. Reals use 17
//! significant digits so every value round-trips exactly.
//!
//! ```text
//! # pasg-records schema=1
//! mode,objective,d,p,allocation,n,replication,seed,err_weighted,err_uniform,wall_time[,coord_0,...]
//! ```
//!
//! `coord_j` columns (the weighted aggregate) appear in `clt` files only.
//! `wall_time` is empty unless timing was requested, which keeps files
//! byte-identical across runs by default.
//!
//! The `bound` mode writes its own small table:
//!
//! ```text
//! # pasg-bound schema=1
//! n,p,alpha,c_gamma,term,value
//! ```

use std::fmt::Write as _;

use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;
pub const RECORD_SCHEMA_LINE: &str = "# pasg-records schema=1";
pub const BOUND_SCHEMA_LINE: &str = "# pasg-bound schema=1";

pub const BASE_COLUMNS: [&str; 11] = [
    "mode",
    "objective",
    "d",
    "p",
    "allocation",
    "n",
    "replication",
    "seed",
    "err_weighted",
    "err_uniform",
    "wall_time",
];

#[derive(Debug, Error, PartialEq)]
pub enum RecordError {
    #[error("missing or unsupported schema line")]
    Schema,
    #[error("unexpected header: {0}")]
    Header(String),
    #[error("row {row}: {message}")]
    Row { row: usize, message: String },
}

/// One replication's outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRecord {
    pub mode: String,
    pub objective: String,
    pub d: usize,
    pub p: usize,
    pub allocation: String,
    pub n: u64,
    pub replication: usize,
    pub seed: u64,
    pub err_weighted: f64,
    pub err_uniform: f64,
    pub wall_time: Option<f64>,
    /// Weighted aggregate, present in `clt` records only.
    pub coords: Option<Vec<f64>>,
}

/// Formats a real with 17 significant digits.
pub fn fmt_real(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn header(coord_dim: Option<usize>) -> String {
    let mut h = BASE_COLUMNS.join(",");
    if let Some(d) = coord_dim {
        for j in 0..d {
            let _ = write!(h, ",coord_{j}");
        }
    }
    h
}

impl ExperimentRecord {
    pub fn to_row(&self) -> String {
        let mut row = format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.mode,
            self.objective,
            self.d,
            self.p,
            self.allocation,
            self.n,
            self.replication,
            self.seed,
            fmt_real(self.err_weighted),
            fmt_real(self.err_uniform),
            self.wall_time.map(fmt_real).unwrap_or_default(),
        );
        for c in self.coords.iter().flatten() {
            row.push(',');
            row.push_str(&fmt_real(*c));
        }
        row
    }

    fn from_fields(fields: &[&str], coord_dim: Option<usize>, row: usize) -> Result<Self, RecordError> {
        let expected = BASE_COLUMNS.len() + coord_dim.unwrap_or(0);
        let bad = |message: String| RecordError::Row { row, message };
        if fields.len() != expected {
            return Err(bad(format!("expected {expected} fields, got {}", fields.len())));
        }
        fn num<T: std::str::FromStr>(s: &str, col: &str, row: usize) -> Result<T, RecordError> {
            s.parse().map_err(|_| RecordError::Row {
                row,
                message: format!("bad {col} `{s}`"),
            })
        }
        let wall_time = match fields[10] {
            "" => None,
            s => Some(num(s, "wall_time", row)?),
        };
        let coords = coord_dim
            .map(|_| fields[11..].iter().map(|s| num(s, "coordinate", row)).collect::<Result<Vec<f64>, _>>())
            .transpose()?;
        Ok(ExperimentRecord {
            mode: fields[0].to_string(),
            objective: fields[1].to_string(),
            d: num(fields[2], "d", row)?,
            p: num(fields[3], "p", row)?,
            allocation: fields[4].to_string(),
            n: num(fields[5], "n", row)?,
            replication: num(fields[6], "replication", row)?,
            seed: num(fields[7], "seed", row)?,
            err_weighted: num(fields[8], "err_weighted", row)?,
            err_uniform: num(fields[9], "err_uniform", row)?,
            wall_time,
            coords,
        })
    }
}

/// Serializes records into a complete CSV document.
pub fn write_records(records: &[ExperimentRecord]) -> String {
    let coord_dim = records.first().and_then(|r| r.coords.as_ref().map(Vec::len));
    let mut out = String::new();
    out.push_str(RECORD_SCHEMA_LINE);
    out.push('\n');
    out.push_str(&header(coord_dim));
    out.push('\n');
    for r in records {
        out.push_str(&r.to_row());
        out.push('\n');
    }
    out
}

/// Parses a CSV document produced by [`write_records`].
pub fn parse_records(text: &str) -> Result<Vec<ExperimentRecord>, RecordError> {
    let mut lines = text.lines();
    if lines.next() != Some(RECORD_SCHEMA_LINE) {
        return Err(RecordError::Schema);
    }
    let head = lines.next().ok_or_else(|| RecordError::Header(String::new()))?;
    let cols: Vec<&str> = head.split(',').collect();
    if cols.len() < BASE_COLUMNS.len() || cols[..BASE_COLUMNS.len()] != BASE_COLUMNS {
        return Err(RecordError::Header(head.to_string()));
    }
    let extra = &cols[BASE_COLUMNS.len()..];
    for (j, c) in extra.iter().enumerate() {
        if *c != format!("coord_{j}") {
            return Err(RecordError::Header(head.to_string()));
        }
    }
    let coord_dim = (!extra.is_empty()).then_some(extra.len());
    lines
        .enumerate()
        .map(|(i, line)| {
            let fields: Vec<&str> = line.split(',').collect();
            ExperimentRecord::from_fields(&fields, coord_dim, i + 1)
        })
        .collect()
}

/// One line of the `bound` table.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundRow {
    pub n: u64,
    pub p: usize,
    pub alpha: f64,
    pub c_gamma: f64,
    pub term: String,
    pub value: f64,
}

pub fn write_bound_rows(rows: &[BoundRow]) -> String {
    let mut out = format!("{BOUND_SCHEMA_LINE}\nn,p,alpha,c_gamma,term,value\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.n,
            r.p,
            fmt_real(r.alpha),
            fmt_real(r.c_gamma),
            r.term,
            fmt_real(r.value)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(coords: Option<Vec<f64>>) -> ExperimentRecord {
        ExperimentRecord {
            mode: "clt".into(),
            objective: "median".into(),
            d: 2,
            p: 10,
            allocation: "pct:0.05;0.45;1.5;3;8;10;10;17;20;30".into(),
            n: 100_000,
            replication: 3,
            seed: 42,
            err_weighted: 1.0 / 3.0,
            err_uniform: 2.0e-7,
            wall_time: None,
            coords,
        }
    }

    #[test]
    fn document_layout() {
        let doc = write_records(&[sample(Some(vec![0.1, -0.2]))]);
        let mut lines = doc.lines();
        assert_eq!(lines.next(), Some(RECORD_SCHEMA_LINE));
        assert_eq!(
            lines.next(),
            Some("mode,objective,d,p,allocation,n,replication,seed,err_weighted,err_uniform,wall_time,coord_0,coord_1")
        );
        assert_eq!(
            lines.next(),
            Some(
                "clt,median,2,10,pct:0.05;0.45;1.5;3;8;10;10;17;20;30,100000,3,42,\
                 3.3333333333333331e-1,1.9999999999999999e-7,,1.0000000000000001e-1,-2.0000000000000001e-1"
            )
        );
        assert!(doc.ends_with('\n') && !doc.contains('\r'));
    }

    #[test]
    fn rejects_foreign_documents() {
        assert_eq!(parse_records("mode,objective\n"), Err(RecordError::Schema));
        let doc = format!("{RECORD_SCHEMA_LINE}\nmode,objective\n");
        assert!(matches!(parse_records(&doc), Err(RecordError::Header(_))));
        let doc = format!("{RECORD_SCHEMA_LINE}\n{}\nrun,median,2\n", header(None));
        assert!(matches!(parse_records(&doc), Err(RecordError::Row { row: 1, .. })));
    }

    fn finite() -> impl Strategy<Value = f64> {
        prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO
    }

    proptest! {
        #[test]
        fn rows_round_trip(
            err_w in finite(),
            err_u in finite(),
            wall in prop::option::of(0.0f64..1e4),
            coords in prop::option::of(prop::collection::vec(finite(), 1..6)),
            n in any::<u64>(),
            seed in any::<u64>(),
        ) {
            let mut r = sample(coords);
            r.err_weighted = err_w;
            r.err_uniform = err_u;
            r.wall_time = wall;
            r.n = n;
            r.seed = seed;
            let back = parse_records(&write_records(std::slice::from_ref(&r))).unwrap();
            prop_assert_eq!(back, vec![r]);
        }
    }
}
