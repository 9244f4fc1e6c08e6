use std::io::Read;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Observations `(xᵢ, yᵢ)` with optional binomial trial counts.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    x: DMatrix<f64>,
    y: DVector<f64>,
    trials: Option<Vec<u32>>,
    names: Vec<String>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        let names = (1..=x.ncols()).map(|j| format!("x{j}")).collect();
        Self::build(x, y, None, names)
    }

    /// Binomial responses: `y[i]` successes out of `trials[i]`.
    pub fn binomial(x: DMatrix<f64>, y: DVector<f64>, trials: Vec<u32>) -> Result<Self> {
        let names = (1..=x.ncols()).map(|j| format!("x{j}")).collect();
        Self::build(x, y, Some(trials), names)
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.x.ncols() {
            return Err(Error::InvalidDataset(format!(
                "{} names for {} columns",
                names.len(),
                self.x.ncols()
            )));
        }
        self.names = names;
        Ok(self)
    }

    fn build(
        x: DMatrix<f64>,
        y: DVector<f64>,
        trials: Option<Vec<u32>>,
        names: Vec<String>,
    ) -> Result<Self> {
        let n = x.nrows();
        if n < 2 {
            return Err(Error::InvalidDataset(format!(
                "{n} observations, need at least 2"
            )));
        }
        if y.len() != n {
            return Err(Error::InvalidDataset(format!(
                "{} responses for {} rows",
                y.len(),
                n
            )));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset("NaN or infinite value".into()));
        }
        if let Some(t) = &trials {
            if t.len() != n {
                return Err(Error::InvalidDataset(format!(
                    "{} trial counts for {} rows",
                    t.len(),
                    n
                )));
            }
            for (i, (yi, ti)) in y.iter().zip(t).enumerate() {
                if *ti == 0 || *yi < 0.0 || *yi > *ti as f64 || yi.fract() != 0.0 {
                    return Err(Error::InvalidDataset(format!(
                        "row {}: {} successes out of {} trials",
                        i + 1,
                        yi,
                        ti
                    )));
                }
            }
        }
        Ok(Self {
            x,
            y,
            trials,
            names,
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn trials(&self) -> Option<&[u32]> {
        self.trials.as_deref()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.x.row(i).iter().copied().collect()
    }

    /// Rows in the given order (duplicates allowed, as in a bootstrap resample).
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        let x = self.x.select_rows(rows.iter());
        let y = DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.y[i]));
        let trials = self
            .trials
            .as_ref()
            .map(|t| rows.iter().map(|&i| t[i]).collect());
        Dataset {
            x,
            y,
            trials,
            names: self.names.clone(),
        }
    }

    /// Reads a CSV with a header row. `response` names the outcome column and
    /// `trials`, when given, the binomial trial counts; every other column is a
    /// feature. Empty cells are rejected with their line and column.
    pub fn from_csv<R: Read>(reader: R, response: &str, trials: Option<&str>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let find = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Format(format!("column '{name}' not found in header")))
        };
        let y_col = find(response)?;
        let t_col = trials.map(find).transpose()?;
        let feature_cols: Vec<usize> = (0..headers.len())
            .filter(|c| *c != y_col && Some(*c) != t_col)
            .collect();

        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut ts = Vec::new();
        for (row, record) in rdr.records().enumerate() {
            let record = record?;
            let line = record
                .position()
                .map(|p| p.line())
                .unwrap_or(row as u64 + 2);
            let cell = |c: usize| -> Result<f64> {
                let raw = record.get(c).unwrap_or("");
                if raw.is_empty() || raw.eq_ignore_ascii_case("na") {
                    return Err(Error::Format(format!(
                        "line {line}, field '{}': missing value",
                        headers[c]
                    )));
                }
                raw.parse::<f64>().map_err(|_| {
                    Error::Format(format!(
                        "line {line}, field '{}': cannot parse '{raw}' as a number",
                        headers[c]
                    ))
                })
            };
            for &c in &feature_cols {
                xs.push(cell(c)?);
            }
            ys.push(cell(y_col)?);
            if let Some(tc) = t_col {
                let t = cell(tc)?;
                if t < 1.0 || t.fract() != 0.0 {
                    return Err(Error::Format(format!(
                        "line {line}, field '{}': trials must be a positive integer",
                        headers[tc]
                    )));
                }
                ts.push(t as u32);
            }
        }
        let n = ys.len();
        let x = DMatrix::from_row_slice(n, feature_cols.len(), &xs);
        let y = DVector::from_vec(ys);
        let names = feature_cols.iter().map(|&c| headers[c].clone()).collect();
        let t = if t_col.is_some() { Some(ts) } else { None };
        Self::build(x, y, t, names)
    }
}
