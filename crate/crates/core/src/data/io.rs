//! JSONL (canonical, one sample per line) and wide CSV (one row per sample-week).
//!
//! CSV layout: `series_id, week, <observed...>, <context...>, <static...>`. Each
//! sample occupies `L + H` consecutive rows; in the horizon rows the demand
//! column carries the target and the other observed columns are empty.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{DataError, Dataset, DatasetSchema, Sample};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataFormat {
    Jsonl,
    Csv,
}

impl DataFormat {
    pub fn from_path(path: &Path) -> Result<Self, DataError> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") => Ok(Self::Jsonl),
            Some("csv") => Ok(Self::Csv),
            _ => Err(DataError::Invalid(format!(
                "cannot infer dataset format of {} (expected .jsonl or .csv)",
                path.display()
            ))),
        }
    }
}

pub fn load_dataset(path: &Path, schema: &DatasetSchema) -> Result<Dataset, DataError> {
    let format = DataFormat::from_path(path)?;
    let text = std::fs::read_to_string(path)?;
    match format {
        DataFormat::Jsonl => parse_jsonl(&text, schema),
        DataFormat::Csv => parse_csv(&text, schema),
    }
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    let format = DataFormat::from_path(path)?;
    let mut out = BufWriter::new(File::create(path)?);
    match format {
        DataFormat::Jsonl => write_jsonl(dataset, &mut out)?,
        DataFormat::Csv => write_csv(dataset, &mut out)?,
    }
    out.flush()?;
    Ok(())
}

pub fn parse_jsonl(text: &str, schema: &DatasetSchema) -> Result<Dataset, DataError> {
    schema.validate()?;
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(line).map_err(|e| DataError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        schema.check_sample(&sample).map_err(|e| DataError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        samples.push(sample);
    }
    Ok(Dataset {
        schema: schema.clone(),
        samples,
    })
}

pub fn write_jsonl<W: Write>(dataset: &Dataset, out: &mut W) -> Result<(), DataError> {
    for s in &dataset.samples {
        serde_json::to_writer(&mut *out, s).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

fn header(schema: &DatasetSchema) -> Vec<String> {
    let mut cols = vec!["series_id".to_string(), "week".to_string()];
    cols.extend(schema.observed.iter().map(|c| c.name.clone()));
    cols.extend(schema.context.iter().map(|c| c.name.clone()));
    cols.extend(schema.static_features.iter().map(|c| c.name.clone()));
    cols
}

pub fn write_csv<W: Write>(dataset: &Dataset, out: &mut W) -> Result<(), DataError> {
    let schema = &dataset.schema;
    let (l, h) = (schema.lookback, schema.horizon);
    let mut seen = HashSet::new();
    writeln!(out, "{}", header(schema).join(","))?;
    for s in &dataset.samples {
        if !seen.insert(s.series_id.as_str()) {
            return Err(DataError::Series {
                series: s.series_id.clone(),
                message: "CSV needs unique series ids per sample".into(),
            });
        }
        if s.series_id.contains([',', '"', '\n']) {
            return Err(DataError::Series {
                series: s.series_id.clone(),
                message: "series id contains a CSV delimiter".into(),
            });
        }
        let statics: Vec<String> = s.static_features.iter().map(usize::to_string).collect();
        for r in 0..l + h {
            let week = s.origin_time - l as i64 + 1 + r as i64;
            let mut fields = vec![s.series_id.clone(), week.to_string()];
            if r < l {
                fields.extend(s.observed[r].iter().map(f64::to_string));
            } else {
                let t = s.target.as_ref().map(|t| t[r - l].to_string());
                fields.push(t.unwrap_or_default());
                fields.extend(std::iter::repeat_n(String::new(), schema.d_observed() - 1));
            }
            fields.extend(s.context[r].iter().map(f64::to_string));
            fields.extend(statics.iter().cloned());
            writeln!(out, "{}", fields.join(","))?;
        }
    }
    Ok(())
}

struct Columns {
    series: usize,
    week: usize,
    observed: Vec<usize>,
    context: Vec<usize>,
    statics: Vec<usize>,
}

fn resolve_columns(names: &[String], schema: &DatasetSchema) -> Result<Columns, DataError> {
    let index: HashMap<&str, usize> = names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    if index.len() != names.len() {
        return Err(DataError::Parse {
            line: 1,
            message: "duplicate column names in header".into(),
        });
    }
    let expected = header(schema);
    let missing: Vec<String> = expected
        .iter()
        .filter(|c| !index.contains_key(c.as_str()))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(DataError::MissingColumns(missing));
    }
    let unexpected: Vec<String> = names
        .iter()
        .filter(|n| !expected.contains(n) && !schema.ignorable_columns.contains(n))
        .cloned()
        .collect();
    if !unexpected.is_empty() {
        return Err(DataError::UnexpectedColumns(unexpected));
    }
    let find = |n: &str| index[n];
    Ok(Columns {
        series: find("series_id"),
        week: find("week"),
        observed: schema.observed.iter().map(|c| find(&c.name)).collect(),
        context: schema.context.iter().map(|c| find(&c.name)).collect(),
        statics: schema.static_features.iter().map(|c| find(&c.name)).collect(),
    })
}

struct Row {
    line: usize,
    week: i64,
    observed: Vec<Option<f64>>,
    context: Vec<f64>,
    statics: Vec<usize>,
}

fn parse_float(field: &str, line: usize, column: &str) -> Result<f64, DataError> {
    let v: f64 = field.trim().parse().map_err(|_| DataError::Parse {
        line,
        message: format!("column `{column}`: cannot parse `{field}` as a number"),
    })?;
    if !v.is_finite() {
        return Err(DataError::Parse {
            line,
            message: format!("column `{column}`: non-finite value"),
        });
    }
    Ok(v)
}

fn parse_row(
    rec: &csv::StringRecord,
    line: usize,
    cols: &Columns,
    schema: &DatasetSchema,
) -> Result<Row, DataError> {
    let field = |i: usize| rec.get(i).unwrap_or("");
    let week = field(cols.week).trim().parse::<i64>().map_err(|_| DataError::Parse {
        line,
        message: format!("column `week`: cannot parse `{}` as an integer", field(cols.week)),
    })?;
    let mut observed = Vec::with_capacity(cols.observed.len());
    for (&c, spec) in cols.observed.iter().zip(&schema.observed) {
        let f = field(c);
        observed.push(if f.trim().is_empty() {
            None
        } else {
            Some(parse_float(f, line, &spec.name)?)
        });
    }
    if let Some(Some(d)) = observed.first() {
        if *d < 0.0 {
            return Err(DataError::Parse {
                line,
                message: format!("negative demand {d}"),
            });
        }
    }
    let context = cols
        .context
        .iter()
        .zip(&schema.context)
        .map(|(&c, spec)| parse_float(field(c), line, &spec.name))
        .collect::<Result<Vec<_>, _>>()?;
    let mut statics = Vec::with_capacity(cols.statics.len());
    for (&c, spec) in cols.statics.iter().zip(&schema.static_features) {
        let ix = field(c).trim().parse::<usize>().map_err(|_| DataError::Parse {
            line,
            message: format!("column `{}`: `{}` is not a category index", spec.name, field(c)),
        })?;
        if ix >= spec.cardinality {
            return Err(DataError::Parse {
                line,
                message: format!(
                    "column `{}`: index {ix} >= cardinality {}",
                    spec.name, spec.cardinality
                ),
            });
        }
        statics.push(ix);
    }
    Ok(Row {
        line,
        week,
        observed,
        context,
        statics,
    })
}

fn assemble(series: String, rows: Vec<Row>, schema: &DatasetSchema) -> Result<Sample, DataError> {
    let (l, h) = (schema.lookback, schema.horizon);
    let fail = |message: String| DataError::Series {
        series: series.clone(),
        message,
    };
    if rows.len() != l + h {
        return Err(fail(format!("has {} weeks, expected L + H = {}", rows.len(), l + h)));
    }
    for pair in rows.windows(2) {
        if pair[1].week != pair[0].week + 1 {
            return Err(fail(format!(
                "line {}: week {} does not follow week {}",
                pair[1].line, pair[1].week, pair[0].week
            )));
        }
    }
    if let Some(r) = rows.iter().find(|r| r.statics != rows[0].statics) {
        return Err(fail(format!("line {}: static features change within the series", r.line)));
    }
    let mut observed = Vec::with_capacity(l);
    for r in &rows[..l] {
        let row: Option<Vec<f64>> = r.observed.iter().copied().collect();
        observed.push(row.ok_or_else(|| {
            fail(format!("line {}: missing observed value in the lookback", r.line))
        })?);
    }
    let target: Vec<Option<f64>> = rows[l..].iter().map(|r| r.observed[0]).collect();
    let target = if target.iter().all(Option::is_none) {
        None
    } else {
        Some(target.into_iter().collect::<Option<Vec<f64>>>().ok_or_else(|| {
            fail("target demand is only partially present in the horizon".into())
        })?)
    };
    let origin_time = rows[l - 1].week;
    let statics = rows[0].statics.clone();
    Ok(Sample {
        series_id: series,
        static_features: statics,
        observed,
        context: rows.into_iter().map(|r| r.context).collect(),
        target,
        origin_time,
    })
}

pub fn parse_csv(text: &str, schema: &DatasetSchema) -> Result<Dataset, DataError> {
    schema.validate()?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(text.as_bytes());
    let names: Vec<String> = reader
        .headers()
        .map_err(|e| DataError::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    let cols = resolve_columns(&names, schema)?;

    let mut samples = Vec::new();
    let mut finished: HashSet<String> = HashSet::new();
    let mut current: Option<(String, Vec<Row>)> = None;
    for rec in reader.records() {
        let rec = rec.map_err(|e| DataError::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let id = rec.get(cols.series).unwrap_or("").trim().to_string();
        if id.is_empty() {
            return Err(DataError::Parse {
                line,
                message: "empty series_id".into(),
            });
        }
        let row = parse_row(&rec, line, &cols, schema)?;
        match &mut current {
            Some((cur, rows)) if *cur == id => rows.push(row),
            _ => {
                if finished.contains(&id) {
                    return Err(DataError::Parse {
                        line,
                        message: format!("rows of series `{id}` are not contiguous"),
                    });
                }
                if let Some((prev, rows)) = current.take() {
                    finished.insert(prev.clone());
                    samples.push(assemble(prev, rows, schema)?);
                }
                current = Some((id, vec![row]));
            }
        }
    }
    if let Some((prev, rows)) = current {
        samples.push(assemble(prev, rows, schema)?);
    }
    Dataset::new(schema.clone(), samples)
}
