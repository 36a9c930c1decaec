//! Column-oriented tables shared by the binning, design and pipeline stages.

use std::io::{Read, Write};

use chrono::NaiveDate;

use crate::error::{Error, Result};
use crate::ingest::parse_date;

/// Named numeric columns with missing values, in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NumericColumns {
    names: Vec<String>,
    data: Vec<Vec<Option<f64>>>,
}

impl NumericColumns {
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Result<&[Option<f64>]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.data[i].as_slice())
            .ok_or_else(|| Error::UnknownVariable(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.iter().any(|n| n == name)
    }

    /// Replaces an existing column or appends a new one.
    pub fn set(&mut self, name: &str, values: Vec<Option<f64>>) {
        match self.names.iter().position(|n| n == name) {
            Some(i) => self.data[i] = values,
            None => {
                self.names.push(name.to_string());
                self.data.push(values);
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[Option<f64>])> {
        self.names.iter().map(String::as_str).zip(self.data.iter().map(Vec::as_slice))
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        NumericColumns {
            names: self.names.clone(),
            data: self.data.iter().map(|col| rows.iter().map(|&r| col[r]).collect()).collect(),
        }
    }
}

pub(crate) fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => crate::stats::format_number(x),
        None => String::new(),
    }
}

pub(crate) fn parse_opt(s: &str) -> std::result::Result<Option<f64>, String> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>().map(Some).map_err(|_| format!("bad number `{s}`"))
}

/// Transaction-level table: identifiers, trade date and bin, plus numeric columns
/// (response, controls, merged discourse measures).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EstimationTable {
    pub tx_id: Vec<String>,
    pub nft_id: Vec<String>,
    pub collection_code: Vec<String>,
    pub trade_date: Vec<NaiveDate>,
    pub trade_bin: Vec<usize>,
    pub numeric: NumericColumns,
}

const KEY_COLUMNS: [&str; 5] = ["tx_id", "nft_id", "collection_code", "trade_date", "trade_bin"];

impl EstimationTable {
    pub fn len(&self) -> usize {
        self.tx_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tx_id.is_empty()
    }

    pub fn column(&self, name: &str) -> Result<&[Option<f64>]> {
        self.numeric.get(name)
    }

    pub fn set_column(&mut self, name: &str, values: Vec<Option<f64>>) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::InvalidInput(format!(
                "column `{name}` has {} rows, table has {}",
                values.len(),
                self.len()
            )));
        }
        self.numeric.set(name, values);
        Ok(())
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        EstimationTable {
            tx_id: rows.iter().map(|&r| self.tx_id[r].clone()).collect(),
            nft_id: rows.iter().map(|&r| self.nft_id[r].clone()).collect(),
            collection_code: rows.iter().map(|&r| self.collection_code[r].clone()).collect(),
            trade_date: rows.iter().map(|&r| self.trade_date[r]).collect(),
            trade_bin: rows.iter().map(|&r| self.trade_bin[r]).collect(),
            numeric: self.numeric.select(rows),
        }
    }

    pub fn filter(&self, keep: impl Fn(usize) -> bool) -> Self {
        let rows: Vec<usize> = (0..self.len()).filter(|&r| keep(r)).collect();
        self.select(&rows)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = KEY_COLUMNS.to_vec();
        header.extend(self.numeric.names().iter().map(String::as_str));
        w.write_record(&header)?;
        let cols: Vec<&[Option<f64>]> = self.numeric.iter().map(|(_, c)| c).collect();
        for r in 0..self.len() {
            let mut rec = vec![
                self.tx_id[r].clone(),
                self.nft_id[r].clone(),
                self.collection_code[r].clone(),
                self.trade_date[r].format("%Y-%m-%d").to_string(),
                self.trade_bin[r].to_string(),
            ];
            rec.extend(cols.iter().map(|c| fmt_opt(c[r])));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("estimation table", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, name: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        if header.len() < KEY_COLUMNS.len() || header[..KEY_COLUMNS.len()] != KEY_COLUMNS {
            return Err(Error::schema(name, format!("expected leading columns {}", KEY_COLUMNS.join(","))));
        }
        let numeric_names = &header[KEY_COLUMNS.len()..];
        let mut t = EstimationTable::default();
        let mut data: Vec<Vec<Option<f64>>> = vec![Vec::new(); numeric_names.len()];
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let bad = |m: String| Error::schema(name, format!("row {}: {m}", i + 1));
            t.tx_id.push(rec[0].to_string());
            t.nft_id.push(rec[1].to_string());
            t.collection_code.push(rec[2].to_string());
            t.trade_date.push(parse_date(&rec[3]).ok_or_else(|| bad(format!("bad date `{}`", &rec[3])))?);
            t.trade_bin.push(rec[4].parse().map_err(|_| bad(format!("bad bin `{}`", &rec[4])))?);
            for (k, col) in data.iter_mut().enumerate() {
                col.push(parse_opt(&rec[KEY_COLUMNS.len() + k]).map_err(bad)?);
            }
        }
        for (n, col) in numeric_names.iter().zip(data) {
            t.numeric.set(n, col);
        }
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_preserves_bits() {
        let mut t = EstimationTable {
            tx_id: vec!["a".into(), "b".into()],
            nft_id: vec!["n1".into(), "n2".into()],
            collection_code: vec!["c".into(), "c".into()],
            trade_date: vec![parse_date("2021-01-01").unwrap(), parse_date("2021-02-03").unwrap()],
            trade_bin: vec![0, 3],
            numeric: NumericColumns::default(),
        };
        t.set_column("y", vec![Some(0.1 + 0.2), None]).unwrap();
        t.set_column("x", vec![Some(-1e-300), Some(std::f64::consts::PI)]).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let back = EstimationTable::read_csv(buf.as_slice(), "t").unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn wrong_length_column_rejected() {
        let mut t = EstimationTable::default();
        assert!(t.set_column("x", vec![Some(1.0)]).is_err());
    }
}
