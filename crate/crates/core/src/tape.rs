//! Trade-tape ingestion: raw tick parsing, same-second aggregation, mismatch
//! filtering, and the immutable tick-indexed [`Tape`].
//!
//! Raw input is delimiter-separated text with a header naming the columns
//! `second, buyer_id, seller_id, sign, shares, price, bid_quote, ask_quote`,
//! one row per execution. When one market order is filled by several
//! counterparties the tape shows a run of consecutive rows sharing the same
//! second, triggering firm and sign; [`aggregate`] merges each such run into
//! a single trade whose volume is the summed notional.
//!
//! A processed tape has one merged trade per row with the columns
//! `tick, trigger_id, sign, volume, quote_before, quote_after`. Tick time is
//! the position in the merged, filtered sequence.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Exchange membership code of a market member ("firm").
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FirmId(pub u32);

impl fmt::Display for FirmId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Order indicator: `Buy` when the triggering firm is buying, `Sell` when it
/// is selling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sign {
    Buy,
    Sell,
}

impl Sign {
    pub fn value(self) -> f64 {
        match self {
            Sign::Buy => 1.0,
            Sign::Sell => -1.0,
        }
    }

    pub fn as_int(self) -> i8 {
        match self {
            Sign::Buy => 1,
            Sign::Sell => -1,
        }
    }

    pub fn from_int(v: i64) -> Option<Self> {
        match v {
            1 => Some(Sign::Buy),
            -1 => Some(Sign::Sell),
            _ => None,
        }
    }
}

/// How the `bid_quote`/`ask_quote` columns are to be read.
///
/// `Price` means plain price levels (the log mid-quote is computed as the
/// average of the log bid and log ask); `LogMid` means the columns already
/// carry log prices. Declared explicitly in the schema so units are never
/// guessed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuoteMode {
    Price,
    LogMid,
}

/// One unprocessed tape row: a single execution against one counterparty.
#[derive(Debug, Clone, PartialEq)]
pub struct TradeRecord {
    /// Wall-clock timestamp in seconds.
    pub second: i64,
    pub buyer: FirmId,
    pub seller: FirmId,
    pub sign: Sign,
    pub shares: u64,
    /// Price per share.
    pub price: f64,
    /// Best bid, in the units declared by the quote mode.
    pub bid_quote: f64,
    /// Best ask, in the units declared by the quote mode.
    pub ask_quote: f64,
}

impl TradeRecord {
    /// The firm that triggered the execution: the buyer when the order
    /// indicator is +1, the seller when it is -1.
    pub fn trigger(&self) -> FirmId {
        match self.sign {
            Sign::Buy => self.buyer,
            Sign::Sell => self.seller,
        }
    }

    /// Notional value of the row in currency units.
    pub fn notional(&self) -> f64 {
        self.shares as f64 * self.price
    }

    /// Log mid-quote of the row under the given quote mode.
    pub fn log_mid(&self, mode: QuoteMode) -> f64 {
        match mode {
            QuoteMode::Price => (self.ask_quote.ln() + self.bid_quote.ln()) / 2.0,
            QuoteMode::LogMid => (self.ask_quote + self.bid_quote) / 2.0,
        }
    }

    /// Log spread of the row under the given quote mode.
    pub fn log_spread(&self, mode: QuoteMode) -> f64 {
        match mode {
            QuoteMode::Price => self.ask_quote.ln() - self.bid_quote.ln(),
            QuoteMode::LogMid => self.ask_quote - self.bid_quote,
        }
    }
}

/// One merged trade in tick time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trade {
    /// 0-based position in the merged (and, once filtered, compacted)
    /// sequence.
    pub tick: usize,
    /// Firm that triggered the merged market order.
    pub trigger: FirmId,
    pub sign: Sign,
    /// Summed notional of the merged rows, in currency units.
    pub volume: f64,
    /// Log mid-quote before the trade.
    pub quote_before: f64,
    /// Log mid-quote after the trade.
    pub quote_after: f64,
}

impl Trade {
    /// Signed instantaneous move `sign * (quote_after - quote_before)`,
    /// non-negative after mismatch filtering.
    pub fn signed_move(&self) -> f64 {
        self.sign.value() * (self.quote_after - self.quote_before)
    }
}

// ---------------------------------------------------------------------------
// Raw parsing
// ---------------------------------------------------------------------------

/// Column names a raw tape header must provide.
pub const RAW_COLUMNS: [&str; 8] = [
    "second",
    "buyer_id",
    "seller_id",
    "sign",
    "shares",
    "price",
    "bid_quote",
    "ask_quote",
];

#[derive(Debug, Clone)]
pub struct ParseOptions {
    pub delimiter: u8,
    pub quote_mode: QuoteMode,
    /// Maximum number of malformed rows tolerated before the run aborts.
    pub row_error_budget: usize,
}

impl Default for ParseOptions {
    fn default() -> Self {
        ParseOptions {
            delimiter: b',',
            quote_mode: QuoteMode::Price,
            row_error_budget: 100,
        }
    }
}

/// A malformed data row, reported with its 1-based line number (the header
/// is line 1).
#[derive(Debug, Clone, Serialize)]
pub struct RowError {
    pub line: u64,
    pub message: String,
}

/// Result of parsing a raw tape: the good rows in file order plus the
/// collected row-level errors.
#[derive(Debug)]
pub struct RawParse {
    pub records: Vec<TradeRecord>,
    pub row_errors: Vec<RowError>,
}

struct ColumnMap {
    idx: [usize; 8],
}

impl ColumnMap {
    fn from_headers(headers: &csv::StringRecord) -> Result<Self> {
        let mut idx = [usize::MAX; 8];
        for (i, name) in RAW_COLUMNS.iter().enumerate() {
            match headers.iter().position(|h| h.trim() == *name) {
                Some(p) => idx[i] = p,
                None => {
                    return Err(CoreError::Schema(format!(
                        "missing column '{name}' in header [{}]",
                        headers.iter().collect::<Vec<_>>().join(", ")
                    )))
                }
            }
        }
        Ok(ColumnMap { idx })
    }

    fn field<'a>(&self, row: &'a csv::StringRecord, col: usize) -> std::result::Result<&'a str, String> {
        row.get(self.idx[col])
            .map(str::trim)
            .ok_or_else(|| format!("row has no field for column '{}'", RAW_COLUMNS[col]))
    }
}

fn parse_field<T: std::str::FromStr>(s: &str, col: &str) -> std::result::Result<T, String> {
    s.parse()
        .map_err(|_| format!("unparseable {col} field '{s}'"))
}

fn record_from_row(map: &ColumnMap, row: &csv::StringRecord, mode: QuoteMode) -> std::result::Result<TradeRecord, String> {
    let second: i64 = parse_field(map.field(row, 0)?, "second")?;
    let buyer: u32 = parse_field(map.field(row, 1)?, "buyer_id")?;
    let seller: u32 = parse_field(map.field(row, 2)?, "seller_id")?;
    let sign_raw: i64 = parse_field(map.field(row, 3)?, "sign")?;
    let sign = Sign::from_int(sign_raw).ok_or_else(|| format!("sign must be +1 or -1, got {sign_raw}"))?;
    let shares: u64 = parse_field(map.field(row, 4)?, "shares")?;
    if shares == 0 {
        return Err("shares must be >= 1".into());
    }
    let price: f64 = parse_field(map.field(row, 5)?, "price")?;
    if !(price > 0.0) {
        return Err(format!("price must be positive, got {price}"));
    }
    let bid_quote: f64 = parse_field(map.field(row, 6)?, "bid_quote")?;
    let ask_quote: f64 = parse_field(map.field(row, 7)?, "ask_quote")?;
    if mode == QuoteMode::Price && (!(bid_quote > 0.0) || !(ask_quote > 0.0)) {
        return Err(format!(
            "quotes must be positive prices in price mode, got bid={bid_quote} ask={ask_quote}"
        ));
    }
    Ok(TradeRecord {
        second,
        buyer: FirmId(buyer),
        seller: FirmId(seller),
        sign,
        shares,
        price,
        bid_quote,
        ask_quote,
    })
}

/// Parse a raw tape from a character stream.
///
/// Malformed rows are collected with their line numbers and parsing
/// continues, up to `row_error_budget`; a header that does not name all
/// schema columns is fatal.
pub fn parse_raw<R: Read>(input: R, opts: &ParseOptions) -> Result<RawParse> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(opts.delimiter)
        .has_headers(true)
        .flexible(true)
        .from_reader(input);

    let headers = reader.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].trim().is_empty()) {
        // An entirely empty stream yields an empty sequence.
        return Ok(RawParse {
            records: Vec::new(),
            row_errors: Vec::new(),
        });
    }
    let map = ColumnMap::from_headers(&headers)?;

    let mut records = Vec::new();
    let mut row_errors = Vec::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        match record_from_row(&map, &row, opts.quote_mode) {
            Ok(rec) => records.push(rec),
            Err(message) => {
                row_errors.push(RowError { line, message });
                if row_errors.len() > opts.row_error_budget {
                    let first = &row_errors[0];
                    return Err(CoreError::RowBudget {
                        errors: row_errors.len(),
                        budget: opts.row_error_budget,
                        first: format!("line {}: {}", first.line, first.message),
                    });
                }
            }
        }
    }
    Ok(RawParse { records, row_errors })
}

/// Parse a raw tape from a file path.
pub fn parse_raw_file(path: &Path, opts: &ParseOptions) -> Result<RawParse> {
    let file = std::fs::File::open(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    parse_raw(std::io::BufReader::new(file), opts)
}

// ---------------------------------------------------------------------------
// Aggregation and filtering
// ---------------------------------------------------------------------------

/// Merge maximal runs of consecutive records sharing (second, triggering
/// firm, sign) into single trades.
///
/// Merged volume is the summed notional of the run; the quote before comes
/// from the first record of the run and the quote after from the last. Runs
/// are consecutive, so interleaved activity by other firms breaks a run.
pub fn aggregate(records: &[TradeRecord], mode: QuoteMode) -> Vec<Trade> {
    let mut trades: Vec<Trade> = Vec::new();
    let mut current_key: Option<(i64, FirmId, Sign)> = None;
    for rec in records {
        let key = (rec.second, rec.trigger(), rec.sign);
        if current_key == Some(key) {
            let last = trades.last_mut().expect("run in progress");
            last.volume += rec.notional();
            last.quote_after = rec.log_mid(mode);
        } else {
            let q = rec.log_mid(mode);
            trades.push(Trade {
                tick: trades.len(),
                trigger: rec.trigger(),
                sign: rec.sign,
                volume: rec.notional(),
                quote_before: q,
                quote_after: q,
            });
            current_key = Some(key);
        }
    }
    trades
}

/// Outcome of removing sign-contradicting trades.
#[derive(Debug)]
pub struct FilterOutcome {
    pub trades: Vec<Trade>,
    pub dropped: usize,
    pub total: usize,
    pub dropped_fraction: f64,
    /// True when the dropped fraction exceeded the configured threshold.
    /// A warning condition, never fatal.
    pub warn: bool,
}

/// Remove every trade whose signed instantaneous move is negative (a "buy"
/// with a falling quote or vice versa, caused by events absent from the
/// tape) and re-compact tick indices. A zero move is kept.
pub fn filter_mismatches(trades: Vec<Trade>, warn_threshold: f64) -> FilterOutcome {
    let total = trades.len();
    let mut kept: Vec<Trade> = trades
        .into_iter()
        .filter(|t| t.signed_move() >= 0.0)
        .collect();
    for (i, t) in kept.iter_mut().enumerate() {
        t.tick = i;
    }
    let dropped = total - kept.len();
    let dropped_fraction = if total == 0 {
        0.0
    } else {
        dropped as f64 / total as f64
    };
    FilterOutcome {
        trades: kept,
        dropped,
        total,
        dropped_fraction,
        warn: dropped_fraction > warn_threshold,
    }
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

/// An immutable, tick-time-indexed trade sequence with its firm index.
///
/// `mean_spread` is the average log spread of the stock; the unit of all
/// impact quantities is basis points of the spread, `sigma = mean_spread /
/// 100`. The firm index partitions the tick range exactly, so the
/// participation ratios sum to one.
#[derive(Debug, Clone)]
pub struct Tape {
    trades: Vec<Trade>,
    stock_label: String,
    mean_spread: f64,
    firm_index: BTreeMap<FirmId, Vec<usize>>,
}

impl Tape {
    pub fn trades(&self) -> &[Trade] {
        &self.trades
    }

    pub fn len(&self) -> usize {
        self.trades.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trades.is_empty()
    }

    pub fn stock_label(&self) -> &str {
        &self.stock_label
    }

    /// Average log spread of the stock.
    pub fn mean_spread(&self) -> f64 {
        self.mean_spread
    }

    /// One basis point of the spread: `mean_spread / 100`.
    pub fn sigma(&self) -> f64 {
        self.mean_spread / 100.0
    }

    pub fn firm_index(&self) -> &BTreeMap<FirmId, Vec<usize>> {
        &self.firm_index
    }

    pub fn firm_ids(&self) -> impl Iterator<Item = FirmId> + '_ {
        self.firm_index.keys().copied()
    }

    /// Ordered tick indices triggered by the firm, if it appears on the tape.
    pub fn firm_ticks(&self, firm: FirmId) -> Option<&[usize]> {
        self.firm_index.get(&firm).map(|v| v.as_slice())
    }

    /// Participation ratio of the firm: fraction of all trades it triggered.
    pub fn participation(&self, firm: FirmId) -> f64 {
        self.firm_ticks(firm).map_or(0.0, |s| s.len() as f64 / self.len() as f64)
    }

    /// Firms with at least `floor` trades, in id order.
    pub fn active_firms(&self, floor: usize) -> Vec<FirmId> {
        self.firm_index
            .iter()
            .filter(|(_, ticks)| ticks.len() >= floor)
            .map(|(id, _)| *id)
            .collect()
    }

    /// Order indicators as a dense `f64` vector.
    pub fn signs(&self) -> Vec<f64> {
        self.trades.iter().map(|t| t.sign.value()).collect()
    }

    pub fn volumes(&self) -> Vec<f64> {
        self.trades.iter().map(|t| t.volume).collect()
    }

    pub fn quotes_before(&self) -> Vec<f64> {
        self.trades.iter().map(|t| t.quote_before).collect()
    }

    pub fn quotes_after(&self) -> Vec<f64> {
        self.trades.iter().map(|t| t.quote_after).collect()
    }

    /// Rebuild with the same quotes/volumes but new trigger ids (used by the
    /// shuffling null model). Lengths must match.
    pub fn with_triggers(&self, triggers: &[FirmId]) -> Result<Tape> {
        if triggers.len() != self.trades.len() {
            return Err(CoreError::Config(
                "trigger reassignment length mismatch".into(),
            ));
        }
        let mut trades = self.trades.clone();
        for (t, id) in trades.iter_mut().zip(triggers) {
            t.trigger = *id;
        }
        build_tape(trades, self.stock_label.clone(), self.mean_spread)
    }
}

/// Assemble a [`Tape`] from merged, filtered trades.
///
/// `mean_spread` is the average log spread; when ingesting raw files it is
/// computed from the quote columns, for processed files it comes from
/// configuration or the generator manifest.
pub fn build_tape(trades: Vec<Trade>, stock_label: String, mean_spread: f64) -> Result<Tape> {
    if trades.is_empty() {
        return Err(CoreError::EmptyTape("cannot build a tape with no trades".into()));
    }
    if !(mean_spread > 0.0) {
        return Err(CoreError::Config(format!(
            "mean_spread must be positive, got {mean_spread}"
        )));
    }
    let mut firm_index: BTreeMap<FirmId, Vec<usize>> = BTreeMap::new();
    for (i, t) in trades.iter().enumerate() {
        debug_assert_eq!(t.tick, i, "tick indices must be compact");
        firm_index.entry(t.trigger).or_default().push(i);
    }
    Ok(Tape {
        trades,
        stock_label,
        mean_spread,
        firm_index,
    })
}

/// Mean log spread over raw records, used when building a tape from a raw
/// file.
pub fn mean_log_spread(records: &[TradeRecord], mode: QuoteMode) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().map(|r| r.log_spread(mode)).sum::<f64>() / records.len() as f64
}

// ---------------------------------------------------------------------------
// Canonical processed-tape file format
// ---------------------------------------------------------------------------

pub const PROCESSED_HEADER: &str = "tick,trigger_id,sign,volume,quote_before,quote_after";

/// Write trades in the canonical processed format (full-precision decimals).
pub fn write_processed<W: std::io::Write>(mut w: W, trades: &[Trade]) -> std::io::Result<()> {
    writeln!(w, "{PROCESSED_HEADER}")?;
    for t in trades {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            t.tick,
            t.trigger,
            t.sign.as_int(),
            t.volume,
            t.quote_before,
            t.quote_after
        )?;
    }
    Ok(())
}

pub fn write_processed_file(path: &Path, trades: &[Trade]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    write_processed(&mut w, trades).map_err(|e| CoreError::io(path.display().to_string(), e))
}

/// Read a processed tape file, validating tick compactness and invariants.
pub fn read_processed<R: Read>(input: R) -> Result<Vec<Trade>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let headers = reader.headers()?.clone();
    let expect: Vec<&str> = PROCESSED_HEADER.split(',').collect();
    let got: Vec<&str> = headers.iter().map(str::trim).collect();
    if got != expect {
        return Err(CoreError::Schema(format!(
            "processed tape header must be '{PROCESSED_HEADER}', got '{}'",
            got.join(",")
        )));
    }
    let mut trades = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let parse = |j: usize, name: &str| -> Result<&str> {
            row.get(j)
                .map(str::trim)
                .ok_or_else(|| CoreError::Schema(format!("line {line}: missing field {name}")))
        };
        let tick: usize = parse(0, "tick")?
            .parse()
            .map_err(|_| CoreError::Schema(format!("line {line}: bad tick")))?;
        if tick != i {
            return Err(CoreError::Schema(format!(
                "line {line}: tick {tick} out of order (expected {i})"
            )));
        }
        let trigger: u32 = parse(1, "trigger_id")?
            .parse()
            .map_err(|_| CoreError::Schema(format!("line {line}: bad trigger_id")))?;
        let sign_raw: i64 = parse(2, "sign")?
            .parse()
            .map_err(|_| CoreError::Schema(format!("line {line}: bad sign")))?;
        let sign = Sign::from_int(sign_raw)
            .ok_or_else(|| CoreError::Schema(format!("line {line}: sign must be +1 or -1")))?;
        let volume: f64 = parse(3, "volume")?
            .parse()
            .map_err(|_| CoreError::Schema(format!("line {line}: bad volume")))?;
        if !(volume > 0.0) {
            return Err(CoreError::Schema(format!(
                "line {line}: volume must be positive"
            )));
        }
        let quote_before: f64 = parse(4, "quote_before")?
            .parse()
            .map_err(|_| CoreError::Schema(format!("line {line}: bad quote_before")))?;
        let quote_after: f64 = parse(5, "quote_after")?
            .parse()
            .map_err(|_| CoreError::Schema(format!("line {line}: bad quote_after")))?;
        trades.push(Trade {
            tick,
            trigger: FirmId(trigger),
            sign,
            volume,
            quote_before,
            quote_after,
        });
    }
    Ok(trades)
}

pub fn read_processed_file(path: &Path) -> Result<Vec<Trade>> {
    let file = std::fs::File::open(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    read_processed(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(second: i64, buyer: u32, seller: u32, sign: i64, shares: u64, price: f64, q: f64) -> TradeRecord {
        TradeRecord {
            second,
            buyer: FirmId(buyer),
            seller: FirmId(seller),
            sign: Sign::from_int(sign).unwrap(),
            shares,
            price,
            bid_quote: q,
            ask_quote: q,
        }
    }

    #[test]
    fn parses_sample_row() {
        let input = "second,buyer_id,seller_id,sign,shares,price,bid_quote,ask_quote\n\
                     2777,9403,9821,1,100,17.25,7.454,7.455\n";
        let opts = ParseOptions {
            quote_mode: QuoteMode::LogMid,
            ..Default::default()
        };
        let out = parse_raw(input.as_bytes(), &opts).unwrap();
        assert!(out.row_errors.is_empty());
        assert_eq!(out.records.len(), 1);
        let r = &out.records[0];
        assert_eq!(r.second, 2777);
        assert_eq!(r.buyer, FirmId(9403));
        assert_eq!(r.seller, FirmId(9821));
        assert_eq!(r.sign, Sign::Buy);
        assert_eq!(r.shares, 100);
        assert_eq!(r.price, 17.25);
        assert_eq!(r.bid_quote, 7.454);
        assert_eq!(r.ask_quote, 7.455);
        assert_eq!(r.trigger(), FirmId(9403));
    }

    #[test]
    fn empty_input_is_empty_sequence() {
        let out = parse_raw("".as_bytes(), &ParseOptions::default()).unwrap();
        assert!(out.records.is_empty());
        assert!(out.row_errors.is_empty());
    }

    #[test]
    fn bad_field_is_row_error_rest_parsed() {
        let input = "second,buyer_id,seller_id,sign,shares,price,bid_quote,ask_quote\n\
                     1,10,20,1,abc,17.25,17.2,17.3\n\
                     2,10,20,1,50,17.25,17.2,17.3\n";
        let out = parse_raw(input.as_bytes(), &ParseOptions::default()).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.row_errors.len(), 1);
        assert_eq!(out.row_errors[0].line, 2);
        assert!(out.row_errors[0].message.contains("shares"));
        assert_eq!(out.records[0].second, 2);
    }

    #[test]
    fn missing_column_is_fatal() {
        let input = "second,buyer_id,seller_id,sign,shares,price,bid_quote\n1,2,3,1,4,5.0,6.0\n";
        let err = parse_raw(input.as_bytes(), &ParseOptions::default()).unwrap_err();
        assert!(matches!(err, CoreError::Schema(_)), "{err}");
        assert!(err.to_string().contains("ask_quote"));
    }

    #[test]
    fn row_error_budget_aborts() {
        let mut input = String::from("second,buyer_id,seller_id,sign,shares,price,bid_quote,ask_quote\n");
        for i in 0..5 {
            input.push_str(&format!("{i},1,2,1,bad,1.0,1.0,1.0\n"));
        }
        let opts = ParseOptions {
            row_error_budget: 3,
            ..Default::default()
        };
        let err = parse_raw(input.as_bytes(), &opts).unwrap_err();
        assert!(matches!(err, CoreError::RowBudget { .. }), "{err}");
    }

    #[test]
    fn aggregates_same_second_run() {
        // Three buys by 9403 in second 2777 merge into one 300-share trade.
        let records = vec![
            rec(2777, 9403, 9821, 1, 100, 17.25, 7.4545),
            rec(2777, 9403, 9575, 1, 150, 17.25, 7.4545),
            rec(2777, 9403, 9813, 1, 50, 17.25, 7.4545),
        ];
        let trades = aggregate(&records, QuoteMode::LogMid);
        assert_eq!(trades.len(), 1);
        let t = &trades[0];
        assert_eq!(t.trigger, FirmId(9403));
        assert_eq!(t.sign, Sign::Buy);
        assert_eq!(t.volume, 300.0 * 17.25);
        assert_eq!(t.tick, 0);
    }

    #[test]
    fn single_record_is_identity() {
        let records = vec![rec(5, 1, 2, -1, 80, 10.0, 3.0)];
        let trades = aggregate(&records, QuoteMode::LogMid);
        assert_eq!(trades.len(), 1);
        assert_eq!(trades[0].volume, 800.0);
        assert_eq!(trades[0].trigger, FirmId(2));
    }

    #[test]
    fn opposite_sign_breaks_run() {
        let records = vec![rec(5, 1, 2, 1, 10, 10.0, 3.0), rec(5, 1, 2, -1, 10, 10.0, 3.0)];
        let trades = aggregate(&records, QuoteMode::LogMid);
        assert_eq!(trades.len(), 2);
    }

    #[test]
    fn interleaving_breaks_run() {
        // Same firm, second and sign, but another firm trades in between.
        let records = vec![
            rec(5, 1, 2, 1, 10, 10.0, 3.0),
            rec(5, 7, 2, 1, 10, 10.0, 3.0),
            rec(5, 1, 2, 1, 10, 10.0, 3.0),
        ];
        let trades = aggregate(&records, QuoteMode::LogMid);
        assert_eq!(trades.len(), 3);
        assert_eq!(trades[1].trigger, FirmId(7));
    }

    #[test]
    fn run_takes_first_and_last_quotes() {
        let mut r1 = rec(5, 1, 2, 1, 10, 10.0, 3.0);
        let mut r2 = rec(5, 1, 3, 1, 10, 10.0, 3.0);
        r1.bid_quote = 3.0;
        r1.ask_quote = 3.0;
        r2.bid_quote = 3.2;
        r2.ask_quote = 3.2;
        let trades = aggregate(&[r1, r2], QuoteMode::LogMid);
        assert_eq!(trades.len(), 1);
        assert_eq!(trades[0].quote_before, 3.0);
        assert_eq!(trades[0].quote_after, 3.2);
    }

    #[test]
    fn volume_conservation() {
        let records = vec![
            rec(1, 1, 2, 1, 10, 10.0, 3.0),
            rec(1, 1, 3, 1, 20, 10.5, 3.0),
            rec(2, 4, 1, -1, 5, 11.0, 3.0),
        ];
        let total: f64 = records.iter().map(|r| r.notional()).sum();
        let trades = aggregate(&records, QuoteMode::LogMid);
        let merged: f64 = trades.iter().map(|t| t.volume).sum();
        assert_eq!(total, merged);
    }

    #[test]
    fn filter_drops_contradicting_sign() {
        let mk = |sign: i64, before: f64, after: f64, tick: usize| Trade {
            tick,
            trigger: FirmId(1),
            sign: Sign::from_int(sign).unwrap(),
            volume: 1.0,
            quote_before: before,
            quote_after: after,
        };
        let trades = vec![
            mk(1, 1.0, 1.0001, 0),  // keep: positive move
            mk(1, 1.0, 0.9999, 1),  // drop: buy with falling quote
            mk(1, 1.0, 1.0, 2),     // keep: zero move is valid
            mk(-1, 1.0, 1.0001, 3), // drop: sell with rising quote
        ];
        let out = filter_mismatches(trades, 0.05);
        assert_eq!(out.trades.len(), 2);
        assert_eq!(out.dropped, 2);
        assert_eq!(out.dropped_fraction, 0.5);
        assert!(out.warn);
        // ticks recompacted
        assert_eq!(out.trades[0].tick, 0);
        assert_eq!(out.trades[1].tick, 1);
        assert!(out.trades.iter().all(|t| t.signed_move() >= 0.0));
    }

    #[test]
    fn build_tape_partitions_ticks() {
        let mut trades = Vec::new();
        for i in 0..10 {
            trades.push(Trade {
                tick: i,
                trigger: FirmId(if i % 10 < 4 { 1 } else { 2 }),
                sign: Sign::Buy,
                volume: 1.0,
                quote_before: 0.0,
                quote_after: 0.0,
            });
        }
        let tape = build_tape(trades, "T".into(), 0.001).unwrap();
        assert_eq!(tape.participation(FirmId(1)), 0.4);
        assert_eq!(tape.participation(FirmId(2)), 0.6);
        let total: usize = tape.firm_index().values().map(|v| v.len()).sum();
        assert_eq!(total, tape.len());
        let pi_sum: f64 = tape.firm_ids().map(|f| tape.participation(f)).sum();
        assert_eq!(pi_sum, 1.0);
    }

    #[test]
    fn build_tape_single_firm_degenerate() {
        let trades: Vec<Trade> = (0..5)
            .map(|i| Trade {
                tick: i,
                trigger: FirmId(9),
                sign: Sign::Sell,
                volume: 2.0,
                quote_before: 0.0,
                quote_after: 0.0,
            })
            .collect();
        let tape = build_tape(trades, "T".into(), 0.001).unwrap();
        assert_eq!(tape.participation(FirmId(9)), 1.0);
        assert_eq!(tape.firm_ticks(FirmId(9)).unwrap(), &[0, 1, 2, 3, 4]);
    }

    #[test]
    fn build_tape_rejects_empty() {
        assert!(matches!(
            build_tape(Vec::new(), "T".into(), 0.001),
            Err(CoreError::EmptyTape(_))
        ));
    }

    #[test]
    fn processed_roundtrip_is_exact() {
        let trades = vec![
            Trade {
                tick: 0,
                trigger: FirmId(9403),
                sign: Sign::Buy,
                volume: 5175.0,
                quote_before: 7.4545,
                quote_after: 7.454500001,
            },
            Trade {
                tick: 1,
                trigger: FirmId(12),
                sign: Sign::Sell,
                volume: 0.1 + 0.2,
                quote_before: -1.5e-7,
                quote_after: 0.0,
            },
        ];
        let mut buf = Vec::new();
        write_processed(&mut buf, &trades).unwrap();
        let back = read_processed(buf.as_slice()).unwrap();
        assert_eq!(trades, back);
    }
}
