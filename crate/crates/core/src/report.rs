//! Error records, bucketing, reporting modes and the execution report.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ErrorKind {
    TypeError,
    BoundsError,
    UseAfterFree,
    DoubleFree,
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ErrorKind::TypeError => "TypeError",
            ErrorKind::BoundsError => "BoundsError",
            ErrorKind::UseAfterFree => "UseAfterFree",
            ErrorKind::DoubleFree => "DoubleFree",
        };
        f.write_str(s)
    }
}

/// Source location of the instruction that triggered a check.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Site {
    pub file: String,
    pub line: u32,
}

impl Site {
    pub fn new(file: impl Into<String>, line: u32) -> Self {
        Site { file: file.into(), line }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.file, self.line)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SanError {
    pub kind: ErrorKind,
    pub static_type: String,
    pub dynamic_type: String,
    /// Offset of the checked address from the allocation's object base.
    pub offset: i64,
    pub site: Site,
}

impl SanError {
    pub fn bucket(&self) -> BucketKey {
        BucketKey {
            kind: self.kind,
            static_type: self.static_type.clone(),
            dynamic_type: self.dynamic_type.clone(),
            offset: self.offset,
        }
    }
}

impl fmt::Display for SanError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "ETSAN {} static={} dynamic={} offset={} site={}",
            self.kind, self.static_type, self.dynamic_type, self.offset, self.site
        )
    }
}

/// Errors are bucketed by kind, types and offset.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BucketKey {
    pub kind: ErrorKind,
    pub static_type: String,
    pub dynamic_type: String,
    pub offset: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(try_from = "String", into = "String")]
pub enum ReportMode {
    /// Log every error and keep going.
    #[default]
    LogAll,
    /// Only count errors.
    CountOnly,
    /// Log errors and stop once this many distinct buckets were seen.
    AbortAfter(u32),
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("invalid report mode `{0}` (expected log, count or abort=N with N >= 1)")]
pub struct ParseModeError(String);

impl FromStr for ReportMode {
    type Err = ParseModeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "log" => Ok(ReportMode::LogAll),
            "count" => Ok(ReportMode::CountOnly),
            _ => match s.strip_prefix("abort=").map(str::parse::<u32>) {
                Some(Ok(n)) if n >= 1 => Ok(ReportMode::AbortAfter(n)),
                _ => Err(ParseModeError(s.to_string())),
            },
        }
    }
}

impl TryFrom<String> for ReportMode {
    type Error = ParseModeError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<ReportMode> for String {
    fn from(m: ReportMode) -> String {
        m.to_string()
    }
}

impl fmt::Display for ReportMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReportMode::LogAll => f.write_str("log"),
            ReportMode::CountOnly => f.write_str("count"),
            ReportMode::AbortAfter(n) => write!(f, "abort={n}"),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub type_checks: u64,
    pub bounds_checks: u64,
    /// Type checks that hit a legacy address; included in `type_checks`.
    pub legacy_checks: u64,
}

impl Counters {
    pub fn add(&mut self, other: &Counters) {
        self.type_checks += other.type_checks;
        self.bounds_checks += other.bounds_checks;
        self.legacy_checks += other.legacy_checks;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bucket {
    pub kind: ErrorKind,
    pub static_type: String,
    pub dynamic_type: String,
    pub offset: i64,
    pub count: u64,
    pub first_site: Site,
}

impl Bucket {
    pub fn key(&self) -> BucketKey {
        BucketKey {
            kind: self.kind,
            static_type: self.static_type.clone(),
            dynamic_type: self.dynamic_type.clone(),
            offset: self.offset,
        }
    }
}

#[derive(Debug, Default)]
struct ReporterState {
    buckets: BTreeMap<BucketKey, (u64, Site)>,
    log: Vec<SanError>,
}

/// Collects errors and check counters. Safe to share between threads.
#[derive(Debug, Default)]
pub struct Reporter {
    mode: ReportMode,
    state: Mutex<ReporterState>,
    type_checks: AtomicU64,
    bounds_checks: AtomicU64,
    legacy_checks: AtomicU64,
    halted: AtomicBool,
}

impl Reporter {
    pub fn new(mode: ReportMode) -> Self {
        Reporter { mode, ..Default::default() }
    }

    pub fn mode(&self) -> ReportMode {
        self.mode
    }

    pub fn count_type_check(&self, legacy: bool) {
        self.type_checks.fetch_add(1, Ordering::Relaxed);
        if legacy {
            self.legacy_checks.fetch_add(1, Ordering::Relaxed);
        }
    }

    pub fn count_bounds_check(&self) {
        self.bounds_checks.fetch_add(1, Ordering::Relaxed);
    }

    /// Records an error. Returns `true` when execution must stop.
    pub fn report(&self, err: SanError) -> bool {
        let mut st = self.state.lock().expect("reporter poisoned");
        let key = err.bucket();
        let entry = st.buckets.entry(key).or_insert_with(|| (0, err.site.clone()));
        entry.0 += 1;
        if self.mode != ReportMode::CountOnly {
            st.log.push(err);
        }
        if let ReportMode::AbortAfter(n) = self.mode {
            if st.buckets.len() >= n as usize {
                self.halted.store(true, Ordering::Relaxed);
            }
        }
        self.halted.load(Ordering::Relaxed)
    }

    pub fn halted(&self) -> bool {
        self.halted.load(Ordering::Relaxed)
    }

    pub fn counters(&self) -> Counters {
        Counters {
            type_checks: self.type_checks.load(Ordering::Relaxed),
            bounds_checks: self.bounds_checks.load(Ordering::Relaxed),
            legacy_checks: self.legacy_checks.load(Ordering::Relaxed),
        }
    }

    pub fn buckets(&self) -> Vec<Bucket> {
        let st = self.state.lock().expect("reporter poisoned");
        st.buckets
            .iter()
            .map(|(k, (count, site))| Bucket {
                kind: k.kind,
                static_type: k.static_type.clone(),
                dynamic_type: k.dynamic_type.clone(),
                offset: k.offset,
                count: *count,
                first_site: site.clone(),
            })
            .collect()
    }

    pub fn log(&self) -> Vec<SanError> {
        self.state.lock().expect("reporter poisoned").log.clone()
    }

    pub fn error_count(&self) -> u64 {
        self.state.lock().expect("reporter poisoned").buckets.values().map(|(n, _)| n).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HaltReason {
    Completed,
    AbortAfterN,
    Fault(String),
}

/// A value returned by an interpreted program.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Value {
    Int(i64),
    Float(f64),
}

impl Value {
    pub fn as_int(self) -> i64 {
        match self {
            Value::Int(v) => v,
            Value::Float(f) => f as i64,
        }
    }

    pub fn as_float(self) -> f64 {
        match self {
            Value::Int(v) => v as f64,
            Value::Float(f) => f,
        }
    }

    /// Raw 64-bit pattern, used for bit-exact comparisons.
    pub fn bits(self) -> u64 {
        match self {
            Value::Int(v) => v as u64,
            Value::Float(f) => f.to_bits(),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(v) => write!(f, "{v}"),
            Value::Float(v) => write!(f, "{v:?}"),
        }
    }
}

/// Outcome of interpreting one program.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecReport {
    pub schema: u32,
    pub program: String,
    pub variant: String,
    pub mode: String,
    pub halted_by: HaltReason,
    pub return_value: Option<Value>,
    pub counters: Counters,
    /// Checks executed inside each function.
    pub functions: BTreeMap<String, Counters>,
    pub buckets: Vec<Bucket>,
    pub log: Vec<SanError>,
    /// SHA-256 of the final memory contents, hex encoded.
    pub memory_digest: String,
}

impl ExecReport {
    pub const SCHEMA: u32 = 1;

    /// Process exit code: 0 completed, 1 aborted, 2 interpreter fault.
    pub fn exit_code(&self) -> i32 {
        match self.halted_by {
            HaltReason::Completed => 0,
            HaltReason::AbortAfterN => 1,
            HaltReason::Fault(_) => 2,
        }
    }

    pub fn bucket_keys(&self) -> Vec<BucketKey> {
        self.buckets.iter().map(Bucket::key).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn err(offset: i64) -> SanError {
        SanError {
            kind: ErrorKind::BoundsError,
            static_type: "int".into(),
            dynamic_type: "account".into(),
            offset,
            site: Site::new("a.ir", 3),
        }
    }

    #[test]
    fn identical_errors_share_a_bucket() {
        let r = Reporter::new(ReportMode::LogAll);
        assert!(!r.report(err(32)));
        assert!(!r.report(err(32)));
        let b = r.buckets();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].count, 2);
        assert_eq!(r.log().len(), 2);
    }

    #[test]
    fn abort_after_n_distinct_buckets() {
        let r = Reporter::new(ReportMode::AbortAfter(2));
        assert!(!r.report(err(1)));
        assert!(!r.report(err(1)));
        assert!(r.report(err(2)));
        assert!(r.halted());
        let r = Reporter::new(ReportMode::AbortAfter(1));
        assert!(r.report(err(1)));
    }

    #[test]
    fn count_only_keeps_no_log() {
        let r = Reporter::new(ReportMode::CountOnly);
        r.report(err(1));
        assert!(r.log().is_empty());
        assert_eq!(r.error_count(), 1);
    }

    #[test]
    fn log_line_format() {
        assert_eq!(err(32).to_string(), "ETSAN BoundsError static=int dynamic=account offset=32 site=a.ir:3");
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("log".parse(), Ok(ReportMode::LogAll));
        assert_eq!("count".parse(), Ok(ReportMode::CountOnly));
        assert_eq!("abort=3".parse(), Ok(ReportMode::AbortAfter(3)));
        assert!("abort=0".parse::<ReportMode>().is_err());
        assert!("loud".parse::<ReportMode>().is_err());
        assert_eq!(ReportMode::AbortAfter(3).to_string(), "abort=3");
    }

    #[test]
    fn counters_are_shared_across_threads() {
        let r = Reporter::new(ReportMode::CountOnly);
        std::thread::scope(|s| {
            for _ in 0..4 {
                s.spawn(|| {
                    for i in 0..100 {
                        r.count_type_check(i % 2 == 0);
                        r.count_bounds_check();
                        r.report(err(i % 3));
                    }
                });
            }
        });
        let c = r.counters();
        assert_eq!((c.type_checks, c.bounds_checks, c.legacy_checks), (400, 400, 200));
        assert_eq!(r.buckets().len(), 3);
        assert_eq!(r.error_count(), 400);
    }
}
