use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TYPES: &str = "struct S { int a[3]; char *s @12; } @size(20);
struct T { float f; S t @4; };
";

const CLEAN: &str = "fn main() -> int {
    let a = new int[4];
    a[3] = 9;
    let x = a[3];
    return x;
}
";

const OVERFLOW: &str = "fn main() -> int {
    let a = new int[4];
    let i: int = 0;
    while (i <= 4) {
        a[i] = i;
        i = i + 1;
    }
    return 0;
}
";

fn etsan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_etsan")).args(args).output().expect("binary runs")
}

fn write(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_clean_program() {
    let dir = TempDir::new().unwrap();
    let prog = write(&dir, "clean.ir", CLEAN);
    let out = etsan(&["run", s(&prog)]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(text.contains("completed, returned 9"), "{text}");
    assert!(text.contains("buckets: 0"), "{text}");
}

#[test]
fn run_reports_overflow_and_writes_json() {
    let dir = TempDir::new().unwrap();
    let prog = write(&dir, "overflow.ir", OVERFLOW);
    let json = dir.path().join("report.json");
    let out = etsan(&["run", s(&prog), "--json", s(&json)]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("BoundsError static=int dynamic=int offset=16"), "{}", stdout(&out));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(v["buckets"].as_array().unwrap().len(), 1);
    assert_eq!(v["variant"], "full");
}

#[test]
fn abort_mode_exits_with_one() {
    let dir = TempDir::new().unwrap();
    let prog = write(&dir, "overflow.ir", OVERFLOW);
    let out = etsan(&["run", s(&prog), "--mode", "abort=1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("aborted"));
}

#[test]
fn type_variant_misses_overflow() {
    let dir = TempDir::new().unwrap();
    let prog = write(&dir, "overflow.ir", OVERFLOW);
    let out = etsan(&["run", s(&prog), "--variant", "type"]);
    assert!(stdout(&out).contains("buckets: 0"));
}

#[test]
fn config_file_is_read() {
    let dir = TempDir::new().unwrap();
    let prog = write(&dir, "overflow.ir", OVERFLOW);
    let cfg = write(&dir, "etsan.toml", "mode = \"count\"\nvariant = \"bounds\"\n");
    let out = etsan(&["run", s(&prog), "--config", s(&cfg)]);
    assert!(stdout(&out).contains("[bounds count]"), "{}", stdout(&out));
    let bad = write(&dir, "bad.toml", "colour = 1\n");
    assert_eq!(etsan(&["run", s(&prog), "--config", s(&bad)]).status.code(), Some(1));
}

#[test]
fn parse_error_exits_with_one() {
    let dir = TempDir::new().unwrap();
    let prog = write(&dir, "bad.ir", "fn main() -> int {\n    return y;\n}\n");
    let out = etsan(&["run", s(&prog)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.ir:2"));
}

#[test]
fn layout_prints_sub_objects() {
    let dir = TempDir::new().unwrap();
    let types = write(&dir, "t.ir", TYPES);
    let out = etsan(&["layout", s(&types), "T", "12"]);
    assert_eq!(out.status.code(), Some(0));
    let mut lines: Vec<String> = stdout(&out).lines().map(str::to_string).collect();
    lines.sort();
    assert_eq!(lines, ["(int, 0)", "(int, 4)", "(int[3], 8)"]);
    assert!(stdout(&etsan(&["layout", s(&types), "T", "100"])).is_empty());
}

#[test]
fn table_prints_entries() {
    let dir = TempDir::new().unwrap();
    let types = write(&dir, "t.ir", TYPES);
    let text = stdout(&etsan(&["table", s(&types), "T"]));
    assert!(text.contains("(T, int, 12) -> -8..4"), "{text}");
    assert!(text.contains("(T, T, 0) -> -inf..inf"), "{text}");
    let json: serde_json::Value = serde_json::from_str(&stdout(&etsan(&["table", s(&types), "T", "--json"]))).unwrap();
    assert!(json.as_array().unwrap().iter().any(|e| e["sub"] == "char *" && e["offset"] == 16 && e["hi"] == 8));
}

#[test]
fn stats_sums_programs() {
    let dir = TempDir::new().unwrap();
    let a = write(&dir, "clean.ir", CLEAN);
    let b = write(&dir, "overflow.ir", OVERFLOW);
    let out = etsan(&["stats", s(&a), s(&b), "--json"]);
    assert_eq!(out.status.code(), Some(0));
    let rows: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let buckets: Vec<u64> = rows.as_array().unwrap().iter().map(|r| r["buckets"].as_u64().unwrap()).collect();
    assert_eq!(buckets, [0, 1]);
    let text = stdout(&etsan(&["stats", s(&a), s(&b)]));
    assert!(text.lines().last().unwrap().starts_with("total"));
}

#[test]
fn instrument_prints_checks() {
    let dir = TempDir::new().unwrap();
    let prog = write(&dir, "clean.ir", CLEAN);
    let out = etsan(&["instrument", s(&prog)]);
    let text = stdout(&out);
    assert!(text.contains("bounds_get(a)"), "{text}");
    assert!(text.contains("bounds_check("), "{text}");
    let plain = stdout(&etsan(&["instrument", s(&prog), "--no-instrument"]));
    assert!(!plain.contains("bounds_check("));
}
