//! Input parsing: transactions, daily market series, raw discourse records.
//!
//! Transactions keep only strictly positive prices with complete identifiers;
//! everything else lands in a rejects report rather than aborting the run. The
//! market table is joined on the exact trade date and never imputed.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TRANSACTION_HEADER: [&str; 5] =
    ["tx_id", "nft_id", "collection_code", "trade_date", "price_usd"];

pub const MARKET_HEADER: [&str; 7] = [
    "date",
    "eth_return",
    "btc_return",
    "sol_return",
    "sp500_return",
    "nasdaq_return",
    "fear_greed",
];

/// Names of the six market controls, in design order.
pub const MARKET_CONTROLS: [&str; 6] = [
    "eth_return",
    "btc_return",
    "sol_return",
    "sp500_return",
    "nasdaq_return",
    "fear_greed",
];

/// One secondary-market sale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transaction {
    pub tx_id: String,
    pub nft_id: String,
    pub collection_code: String,
    pub trade_date: NaiveDate,
    pub price_usd: f64,
    /// `ln(1 + price_usd)`.
    pub y: f64,
}

/// The log price transform applied to every retained sale.
pub fn log_price(price_usd: f64) -> f64 {
    price_usd.ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarketSeriesRow {
    pub date: NaiveDate,
    pub eth_return: f64,
    pub btc_return: f64,
    pub sol_return: f64,
    pub sp500_return: f64,
    pub nasdaq_return: f64,
    pub fear_greed: f64,
}

impl MarketSeriesRow {
    /// Controls in [`MARKET_CONTROLS`] order.
    pub fn controls(&self) -> [f64; 6] {
        [
            self.eth_return,
            self.btc_return,
            self.sol_return,
            self.sp500_return,
            self.nasdaq_return,
            self.fear_greed,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RawDiscourseRecord {
    pub collection_code: String,
    pub url: String,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub body: String,
    #[serde(default)]
    pub subreddit: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectKind {
    MissingField,
    Unparseable,
    NonpositivePrice,
    DuplicateId,
    OutOfRange,
}

impl RejectKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectKind::MissingField => "missing_field",
            RejectKind::Unparseable => "unparseable",
            RejectKind::NonpositivePrice => "nonpositive_price",
            RejectKind::DuplicateId => "duplicate_id",
            RejectKind::OutOfRange => "out_of_range",
        }
    }
}

/// A dropped input row. `row` is the 1-based data row number (header excluded).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reject {
    pub file: String,
    pub row: usize,
    pub kind: RejectKind,
    pub reason: String,
}

/// Rows retained from a file plus the rows that were rejected.
#[derive(Debug, Clone)]
pub struct Parsed<T> {
    pub rows: Vec<T>,
    pub rejects: Vec<Reject>,
}

impl<T> Parsed<T> {
    pub fn reject_counts(&self) -> BTreeMap<RejectKind, usize> {
        let mut out = BTreeMap::new();
        for r in &self.rejects {
            *out.entry(r.kind).or_insert(0) += 1;
        }
        out
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn check_header(file: &str, found: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    let got: Vec<&str> = found.iter().map(str::trim).collect();
    if got != expected {
        return Err(Error::schema(
            file,
            format!("expected header `{}`, found `{}`", expected.join(","), got.join(",")),
        ));
    }
    Ok(())
}

pub fn parse_date(s: &str) -> Option<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").ok()
}

pub fn parse_transactions(path: impl AsRef<Path>) -> Result<Parsed<Transaction>> {
    let path = path.as_ref();
    parse_transactions_from_reader(open(path)?, &path.display().to_string())
}

pub fn parse_transactions_from_reader<R: Read>(reader: R, name: &str) -> Result<Parsed<Transaction>> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    check_header(name, rdr.headers()?, &TRANSACTION_HEADER)?;

    let mut rows = Vec::new();
    let mut rejects = Vec::new();
    let mut seen = HashSet::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        let mut reject = |kind, reason: String| {
            rejects.push(Reject { file: name.to_string(), row, kind, reason });
        };
        if rec.len() != TRANSACTION_HEADER.len() {
            reject(RejectKind::Unparseable, format!("expected 5 fields, found {}", rec.len()));
            continue;
        }
        let field = |k: usize| rec.get(k).map(str::trim).unwrap_or("");
        if let Some(k) = (0..5).find(|&k| field(k).is_empty()) {
            reject(RejectKind::MissingField, format!("missing {}", TRANSACTION_HEADER[k]));
            continue;
        }
        let Some(trade_date) = parse_date(field(3)) else {
            reject(RejectKind::Unparseable, format!("bad trade_date `{}`", field(3)));
            continue;
        };
        let price_usd: f64 = match field(4).parse() {
            Ok(p) if f64::is_finite(p) => p,
            _ => {
                reject(RejectKind::Unparseable, format!("bad price_usd `{}`", field(4)));
                continue;
            }
        };
        if price_usd <= 0.0 {
            reject(RejectKind::NonpositivePrice, format!("price_usd {price_usd} is not positive"));
            continue;
        }
        if !seen.insert(field(0).to_string()) {
            reject(RejectKind::DuplicateId, format!("duplicate tx_id `{}`", field(0)));
            continue;
        }
        rows.push(Transaction {
            tx_id: field(0).to_string(),
            nft_id: field(1).to_string(),
            collection_code: field(2).to_string(),
            trade_date,
            price_usd,
            y: log_price(price_usd),
        });
    }
    Ok(Parsed { rows, rejects })
}

/// Parses the daily market table. Rows with missing or unparseable values are
/// rejected (never imputed); duplicate dates are left for [`join_market_controls`]
/// to refuse.
pub fn parse_market(path: impl AsRef<Path>) -> Result<Parsed<MarketSeriesRow>> {
    let path = path.as_ref();
    parse_market_from_reader(open(path)?, &path.display().to_string())
}

pub fn parse_market_from_reader<R: Read>(reader: R, name: &str) -> Result<Parsed<MarketSeriesRow>> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    check_header(name, rdr.headers()?, &MARKET_HEADER)?;
    let mut rows = Vec::new();
    let mut rejects = Vec::new();
    'rows: for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        let mut reject = |kind, reason: String| {
            rejects.push(Reject { file: name.to_string(), row, kind, reason });
        };
        if rec.len() != MARKET_HEADER.len() {
            reject(RejectKind::Unparseable, format!("expected 7 fields, found {}", rec.len()));
            continue;
        }
        let Some(date) = parse_date(&rec[0]) else {
            reject(RejectKind::Unparseable, format!("bad date `{}`", &rec[0]));
            continue;
        };
        let mut vals = [0.0; 6];
        for k in 0..6 {
            let s = rec[k + 1].trim();
            if s.is_empty() {
                reject(RejectKind::MissingField, format!("missing {}", MARKET_HEADER[k + 1]));
                continue 'rows;
            }
            match s.parse::<f64>() {
                Ok(v) if v.is_finite() => vals[k] = v,
                _ => {
                    reject(RejectKind::Unparseable, format!("bad {} `{s}`", MARKET_HEADER[k + 1]));
                    continue 'rows;
                }
            }
        }
        if !(0.0..=100.0).contains(&vals[5]) {
            reject(RejectKind::OutOfRange, format!("fear_greed {} outside [0,100]", vals[5]));
            continue;
        }
        rows.push(MarketSeriesRow {
            date,
            eth_return: vals[0],
            btc_return: vals[1],
            sol_return: vals[2],
            sp500_return: vals[3],
            nasdaq_return: vals[4],
            fear_greed: vals[5],
        });
    }
    Ok(Parsed { rows, rejects })
}

/// A transaction with the market controls of its trade date attached.
#[derive(Debug, Clone, PartialEq)]
pub struct JoinedTransaction {
    pub tx: Transaction,
    pub controls: [f64; 6],
}

#[derive(Debug, Clone)]
pub struct MarketJoin {
    pub rows: Vec<JoinedTransaction>,
    /// Transactions whose trade date had no market row (complete-case exclusion).
    pub excluded: Vec<Transaction>,
}

/// Exact-date join of market controls. Input order is preserved.
pub fn join_market_controls(txs: &[Transaction], market: &[MarketSeriesRow]) -> Result<MarketJoin> {
    let mut by_date: HashMap<NaiveDate, [f64; 6]> = HashMap::with_capacity(market.len());
    for m in market {
        if by_date.insert(m.date, m.controls()).is_some() {
            return Err(Error::DuplicateMarketDate(m.date));
        }
    }
    let mut rows = Vec::with_capacity(txs.len());
    let mut excluded = Vec::new();
    for tx in txs {
        match by_date.get(&tx.trade_date) {
            Some(c) => rows.push(JoinedTransaction { tx: tx.clone(), controls: *c }),
            None => excluded.push(tx.clone()),
        }
    }
    Ok(MarketJoin { rows, excluded })
}

#[derive(Debug, Deserialize)]
struct DiscourseCsvRow {
    url: String,
    #[serde(default)]
    title: String,
    #[serde(default)]
    body: String,
    #[serde(default)]
    subreddit: String,
    collection_code: String,
}

/// Parses discourse records from CSV or JSON Lines (chosen by `.jsonl`/`.json` extension).
pub fn parse_discourse(path: impl AsRef<Path>) -> Result<Parsed<RawDiscourseRecord>> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let is_jsonl = matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("jsonl") | Some("json") | Some("ndjson")
    );
    if is_jsonl {
        parse_discourse_jsonl(BufReader::new(open(path)?), &name)
    } else {
        parse_discourse_csv(open(path)?, &name)
    }
}

pub fn parse_discourse_csv<R: Read>(reader: R, name: &str) -> Result<Parsed<RawDiscourseRecord>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    for required in ["url", "title", "body", "subreddit", "collection_code"] {
        if !headers.iter().any(|h| h.trim() == required) {
            return Err(Error::schema(name, format!("missing column `{required}`")));
        }
    }
    let mut rows = Vec::new();
    let mut rejects = Vec::new();
    for (i, rec) in rdr.deserialize::<DiscourseCsvRow>().enumerate() {
        match rec {
            Ok(r) => push_discourse(
                &mut rows,
                &mut rejects,
                name,
                i + 1,
                RawDiscourseRecord {
                    collection_code: r.collection_code,
                    url: r.url,
                    title: r.title,
                    body: r.body,
                    subreddit: r.subreddit,
                    metadata: BTreeMap::new(),
                },
            ),
            Err(e) => rejects.push(Reject {
                file: name.to_string(),
                row: i + 1,
                kind: RejectKind::Unparseable,
                reason: e.to_string(),
            }),
        }
    }
    Ok(Parsed { rows, rejects })
}

pub fn parse_discourse_jsonl<R: BufRead>(reader: R, name: &str) -> Result<Parsed<RawDiscourseRecord>> {
    let mut rows = Vec::new();
    let mut rejects = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(name, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(e) => {
                rejects.push(Reject {
                    file: name.to_string(),
                    row: i + 1,
                    kind: RejectKind::Unparseable,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let mut rec = RawDiscourseRecord::default();
        if let serde_json::Value::Object(map) = value {
            for (k, v) in map {
                let s = match v {
                    serde_json::Value::String(s) => s,
                    serde_json::Value::Null => String::new(),
                    other => other.to_string(),
                };
                match k.as_str() {
                    "collection_code" => rec.collection_code = s,
                    "url" => rec.url = s,
                    "title" => rec.title = s,
                    "body" => rec.body = s,
                    "subreddit" => rec.subreddit = s,
                    _ => {
                        rec.metadata.insert(k, s);
                    }
                }
            }
        }
        push_discourse(&mut rows, &mut rejects, name, i + 1, rec);
    }
    Ok(Parsed { rows, rejects })
}

fn push_discourse(
    rows: &mut Vec<RawDiscourseRecord>,
    rejects: &mut Vec<Reject>,
    name: &str,
    row: usize,
    rec: RawDiscourseRecord,
) {
    let missing = if rec.collection_code.trim().is_empty() {
        Some("missing collection_code")
    } else if rec.url.trim().is_empty() {
        Some("missing url")
    } else {
        None
    };
    match missing {
        Some(reason) => rejects.push(Reject {
            file: name.to_string(),
            row,
            kind: RejectKind::MissingField,
            reason: reason.to_string(),
        }),
        None => rows.push(rec),
    }
}

/// Writes the rejects report: `file,row,kind,reason`.
pub fn write_rejects<W: Write>(writer: W, rejects: &[Reject]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["file", "row", "kind", "reason"])?;
    for r in rejects {
        w.write_record([r.file.as_str(), &r.row.to_string(), r.kind.as_str(), r.reason.as_str()])?;
    }
    w.flush().map_err(|e| Error::io("rejects", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn txs(body: &str) -> Parsed<Transaction> {
        let data = format!("tx_id,nft_id,collection_code,trade_date,price_usd\n{body}");
        parse_transactions_from_reader(data.as_bytes(), "t.csv").unwrap()
    }

    #[test]
    fn zero_price_dropped() {
        let p = txs("a,n1,c1,2021-01-02,0\nb,n1,c1,2021-01-02,10\n");
        assert_eq!(p.rows.len(), 1);
        assert_eq!(p.rejects[0].kind, RejectKind::NonpositivePrice);
    }

    #[test]
    fn log_transform_of_e_minus_one() {
        let price = std::f64::consts::E - 1.0;
        let p = txs(&format!("a,n1,c1,2021-01-02,{price}\n"));
        assert!((p.rows[0].y - 1.0).abs() < 1e-12);
    }

    #[test]
    fn missing_nft_id_rejected() {
        let p = txs("a,n1,c1,2021-01-02,5\nb,,c1,2021-01-02,6\nc,n2,c2,2021-01-03,7\n");
        assert_eq!(p.rows.len(), 2);
        assert_eq!(p.rejects.len(), 1);
        assert_eq!(p.rejects[0].row, 2);
        assert_eq!(p.rejects[0].kind, RejectKind::MissingField);
    }

    #[test]
    fn bad_header_is_fatal() {
        let r = parse_transactions_from_reader("tx,nft_id\n".as_bytes(), "t.csv");
        assert!(matches!(r, Err(Error::Schema { .. })));
    }

    #[test]
    fn unparseable_rows_are_reported() {
        let p = txs("a,n1,c1,2021-13-02,5\nb,n1,c1,2021-01-02,abc\nc,n1,c1\na,n1,c1,2021-01-02,1\na,n1,c1,2021-01-02,2\n");
        let kinds: Vec<_> = p.rejects.iter().map(|r| r.kind).collect();
        assert_eq!(
            kinds,
            vec![
                RejectKind::Unparseable,
                RejectKind::Unparseable,
                RejectKind::Unparseable,
                RejectKind::DuplicateId
            ]
        );
        assert_eq!(p.rows.len(), 1);
    }

    fn market_row(date: &str) -> MarketSeriesRow {
        MarketSeriesRow {
            date: parse_date(date).unwrap(),
            eth_return: 0.01,
            btc_return: 0.02,
            sol_return: 0.03,
            sp500_return: 0.04,
            nasdaq_return: 0.05,
            fear_greed: 50.0,
        }
    }

    #[test]
    fn join_exact_date() {
        let p = txs("a,n1,c1,2021-01-02,5\nb,n1,c1,2021-01-03,6\n");
        let j = join_market_controls(&p.rows, &[market_row("2021-01-02")]).unwrap();
        assert_eq!(j.rows.len(), 1);
        assert_eq!(j.rows[0].controls, [0.01, 0.02, 0.03, 0.04, 0.05, 50.0]);
        assert_eq!(j.excluded.len(), 1);
        assert_eq!(j.excluded[0].tx_id, "b");
    }

    #[test]
    fn duplicate_market_date_is_fatal() {
        let p = txs("a,n1,c1,2021-01-02,5\n");
        let r = join_market_controls(&p.rows, &[market_row("2021-01-02"), market_row("2021-01-02")]);
        assert!(matches!(r, Err(Error::DuplicateMarketDate(_))));
    }

    #[test]
    fn market_rows_never_imputed() {
        let data = "date,eth_return,btc_return,sol_return,sp500_return,nasdaq_return,fear_greed\n\
                    2021-01-01,0.1,0.1,0.1,0.1,0.1,40\n\
                    2021-01-02,0.1,,0.1,0.1,0.1,40\n\
                    2021-01-03,0.1,0.1,0.1,0.1,0.1,140\n";
        let p = parse_market_from_reader(data.as_bytes(), "m.csv").unwrap();
        assert_eq!(p.rows.len(), 1);
        assert_eq!(p.rejects.len(), 2);
    }

    #[test]
    fn discourse_jsonl_keeps_metadata() {
        let data = r#"{"collection_code":"c1","url":"https://reddit.com/r/x/comments/abc/t/","title":"T","body":"B","subreddit":"x","score":5}
{"url":"https://reddit.com/r/x/comments/abd/t/","title":"T"}
"#;
        let p = parse_discourse_jsonl(data.as_bytes(), "d.jsonl").unwrap();
        assert_eq!(p.rows.len(), 1);
        assert_eq!(p.rows[0].metadata.get("score").map(String::as_str), Some("5"));
        assert_eq!(p.rejects.len(), 1);
    }
}
