//! Isolated in-memory SQLite databases for evaluating queries.
//!
//! Every [`DatabaseHandle`] owns its own in-memory connection built from a
//! [`DatabaseSpec`] dump, so handles never observe each other's state. After
//! the build the connection is switched to `query_only`, and [`DatabaseHandle::execute`]
//! additionally refuses statements SQLite does not report as read-only, so
//! repeated executions of the same query are deterministic.

mod denotation;

use std::path::Path;
use std::time::{Duration, Instant};

use rusqlite::fallible_iterator::FallibleIterator;
use rusqlite::{Batch, Connection, ErrorCode, OpenFlags};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DatabaseSpec;

pub use denotation::{denotation_equal, normalize_result, ComparisonMode, Denotation, Value};

pub const DEFAULT_TIMEOUT_MS: u64 = 5_000;
pub const DEFAULT_MAX_ROWS: usize = 10_000;

/// VM instructions between deadline checks.
const PROGRESS_INTERVAL: i32 = 1_000;

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("database `{db_id}`: statement {statement_index} failed to build: {message}")]
    Build { db_id: String, statement_index: usize, message: String },
    #[error("ragged result: row {row} has {found} values, expected {expected}")]
    RaggedRows { row: usize, expected: usize, found: usize },
    #[error("sqlite: {0}")]
    Sqlite(#[from] rusqlite::Error),
}

/// Per-execution resource limits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExecLimits {
    pub timeout_ms: u64,
    pub max_rows: usize,
}

impl Default for ExecLimits {
    fn default() -> Self {
        ExecLimits { timeout_ms: DEFAULT_TIMEOUT_MS, max_rows: DEFAULT_MAX_ROWS }
    }
}

/// Result of executing one query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "detail", rename_all = "snake_case")]
pub enum ExecOutcome {
    Ok(Denotation),
    SyntaxError(String),
    RuntimeError(String),
    /// Wall-clock limit in milliseconds that was exceeded.
    Timeout(u64),
}

impl ExecOutcome {
    pub fn denotation(&self) -> Option<&Denotation> {
        match self {
            ExecOutcome::Ok(d) => Some(d),
            _ => None,
        }
    }

    pub fn is_ok(&self) -> bool {
        matches!(self, ExecOutcome::Ok(_))
    }

    /// Short name of the variant, used in reports.
    pub fn kind(&self) -> &'static str {
        match self {
            ExecOutcome::Ok(_) => "ok",
            ExecOutcome::SyntaxError(_) => "syntax_error",
            ExecOutcome::RuntimeError(_) => "runtime_error",
            ExecOutcome::Timeout(_) => "timeout",
        }
    }

    pub fn error_message(&self) -> Option<String> {
        match self {
            ExecOutcome::Ok(_) => None,
            ExecOutcome::SyntaxError(m) | ExecOutcome::RuntimeError(m) => Some(m.clone()),
            ExecOutcome::Timeout(ms) => Some(format!("exceeded {ms} ms")),
        }
    }
}

/// A built, isolated database instance. Use from one thread at a time.
pub struct DatabaseHandle {
    db_id: String,
    conn: Connection,
    limits: ExecLimits,
}

impl std::fmt::Debug for DatabaseHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DatabaseHandle")
            .field("db_id", &self.db_id)
            .field("limits", &self.limits)
            .finish()
    }
}

/// Build a fresh in-memory database from `spec.dump_text`.
pub fn build_database(spec: &DatabaseSpec, limits: ExecLimits) -> Result<DatabaseHandle, SandboxError> {
    let conn = Connection::open_in_memory()?;
    let build_err = |statement_index: usize, e: rusqlite::Error| SandboxError::Build {
        db_id: spec.db_id.clone(),
        statement_index,
        message: e.to_string(),
    };

    let mut batch = Batch::new(&conn, &spec.dump_text);
    let mut index = 0;
    loop {
        let mut stmt = match batch.next() {
            Ok(Some(stmt)) => stmt,
            Ok(None) => break,
            Err(e) => return Err(build_err(index, e)),
        };
        // Drain rather than `execute`, since PRAGMAs in dumps may return rows.
        let mut rows = stmt.raw_query();
        loop {
            match rows.next() {
                Ok(Some(_)) => continue,
                Ok(None) => break,
                Err(e) => return Err(build_err(index, e)),
            }
        }
        index += 1;
    }
    // A dump that opened a transaction without closing it would keep it open.
    if !conn.is_autocommit() {
        conn.execute_batch("COMMIT").map_err(|e| build_err(index, e))?;
    }
    conn.pragma_update(None, "query_only", true)?;

    Ok(DatabaseHandle { db_id: spec.db_id.clone(), conn, limits })
}

impl DatabaseHandle {
    pub fn db_id(&self) -> &str {
        &self.db_id
    }

    pub fn limits(&self) -> ExecLimits {
        self.limits
    }

    pub fn set_limits(&mut self, limits: ExecLimits) {
        self.limits = limits;
    }

    /// The `CREATE` statements of every table, view and index, without data.
    pub fn schema_sql(&self) -> Result<String, SandboxError> {
        let mut stmt = self.conn.prepare(
            "SELECT sql FROM sqlite_master WHERE sql IS NOT NULL AND name NOT LIKE 'sqlite_%' ORDER BY rowid",
        )?;
        let statements = stmt
            .query_map([], |row| row.get::<_, String>(0))?
            .map(|s| s.map(|s| format!("{s};")))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(statements.join("\n"))
    }

    /// Execute with the handle's own limits.
    pub fn execute(&self, sql: &str) -> ExecOutcome {
        self.execute_with(sql, &self.limits)
    }

    pub fn execute_with(&self, sql: &str, limits: &ExecLimits) -> ExecOutcome {
        let sql = strip_trailing_semicolons(sql);
        if sql.is_empty() {
            return ExecOutcome::SyntaxError("empty query".to_string());
        }

        let deadline = Instant::now() + Duration::from_millis(limits.timeout_ms);
        if let Err(e) = self
            .conn
            .progress_handler(PROGRESS_INTERVAL, Some(move || Instant::now() >= deadline))
        {
            return ExecOutcome::RuntimeError(e.to_string());
        }
        let outcome = self.run_query(sql, limits);
        let _ = self.conn.progress_handler(PROGRESS_INTERVAL, None::<fn() -> bool>);
        outcome
    }

    fn run_query(&self, sql: &str, limits: &ExecLimits) -> ExecOutcome {
        let mut stmt = match self.conn.prepare(sql) {
            Ok(s) => s,
            Err(e) => return classify_error(e, limits),
        };
        if !stmt.readonly() {
            return ExecOutcome::RuntimeError(
                "mutating statement rejected: only read queries are evaluated".to_string(),
            );
        }
        let columns = stmt.column_count();
        if columns == 0 {
            return ExecOutcome::RuntimeError(
                "statement returns no result columns: only read queries are evaluated".to_string(),
            );
        }

        let mut rows = stmt.raw_query();
        let mut out: Vec<Vec<Value>> = Vec::new();
        let mut truncated = false;
        loop {
            match rows.next() {
                Ok(Some(row)) => {
                    if out.len() == limits.max_rows {
                        truncated = true;
                        break;
                    }
                    let mut values = Vec::with_capacity(columns);
                    for i in 0..columns {
                        match row.get::<_, rusqlite::types::Value>(i) {
                            Ok(v) => values.push(Value::from(v)),
                            Err(e) => return ExecOutcome::RuntimeError(e.to_string()),
                        }
                    }
                    out.push(values);
                }
                Ok(None) => break,
                Err(e) => return classify_error(e, limits),
            }
        }
        if truncated {
            log::warn!(
                "database `{}`: result truncated at {} rows",
                self.db_id,
                limits.max_rows
            );
        }
        match Denotation::new(columns, out, truncated) {
            Ok(d) => ExecOutcome::Ok(d),
            Err(e) => ExecOutcome::RuntimeError(e.to_string()),
        }
    }
}

fn strip_trailing_semicolons(sql: &str) -> &str {
    let mut s = sql.trim();
    while let Some(rest) = s.strip_suffix(';') {
        s = rest.trim_end();
    }
    s
}

/// SQLite reports name-resolution failures at prepare time, the same phase as
/// grammar errors, so the split is made on the message instead.
fn classify_error(e: rusqlite::Error, limits: &ExecLimits) -> ExecOutcome {
    if e.sqlite_error_code() == Some(ErrorCode::OperationInterrupted) {
        return ExecOutcome::Timeout(limits.timeout_ms);
    }
    if matches!(e, rusqlite::Error::MultipleStatement) {
        return ExecOutcome::SyntaxError("multiple statements in one query".to_string());
    }
    let message = e.to_string();
    let lower = message.to_ascii_lowercase();
    let message = if message.trim().is_empty() { "unknown error".to_string() } else { message };
    if lower.contains("syntax error") || lower.contains("incomplete input") || lower.contains("unrecognized token") {
        ExecOutcome::SyntaxError(message)
    } else {
        ExecOutcome::RuntimeError(message)
    }
}

/// Render an on-disk SQLite database file as dump text that
/// [`build_database`] can replay.
pub fn dump_sqlite_file(path: &Path) -> Result<String, SandboxError> {
    let conn = Connection::open_with_flags(path, OpenFlags::SQLITE_OPEN_READ_ONLY)?;
    let mut objects: Vec<(String, String, String)> = Vec::new();
    {
        let mut stmt = conn.prepare(
            "SELECT type, name, sql FROM sqlite_master \
             WHERE sql IS NOT NULL AND name NOT LIKE 'sqlite_%' ORDER BY rowid",
        )?;
        let rows = stmt.query_map([], |r| Ok((r.get(0)?, r.get(1)?, r.get(2)?)))?;
        for row in rows {
            objects.push(row?);
        }
    }

    let mut out = String::from("BEGIN TRANSACTION;\n");
    for (_, name, sql) in objects.iter().filter(|(kind, _, _)| kind == "table") {
        out.push_str(sql);
        out.push_str(";\n");
        let quoted = format!("\"{}\"", name.replace('"', "\"\""));
        let mut stmt = conn.prepare(&format!("SELECT * FROM {quoted}"))?;
        let cols = stmt.column_count();
        let mut rows = stmt.query([])?;
        while let Some(row) = rows.next()? {
            let mut literals = Vec::with_capacity(cols);
            for i in 0..cols {
                literals.push(sql_literal(&row.get::<_, rusqlite::types::Value>(i)?));
            }
            out.push_str(&format!("INSERT INTO {quoted} VALUES({});\n", literals.join(",")));
        }
    }
    for (_, _, sql) in objects.iter().filter(|(kind, _, _)| kind != "table") {
        out.push_str(sql);
        out.push_str(";\n");
    }
    out.push_str("COMMIT;\n");
    Ok(out)
}

fn sql_literal(v: &rusqlite::types::Value) -> String {
    use rusqlite::types::Value as Raw;
    match v {
        Raw::Null => "NULL".to_string(),
        Raw::Integer(i) => i.to_string(),
        Raw::Real(f) if f.is_finite() => format!("{f:?}"),
        Raw::Real(f) => if *f > 0.0 { "9e999" } else { "-9e999" }.to_string(),
        Raw::Text(s) => format!("'{}'", s.replace('\'', "''")),
        Raw::Blob(b) => format!("X'{}'", hex::encode(b)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(dump: &str) -> DatabaseSpec {
        DatabaseSpec::new("toy", dump)
    }

    fn handle(dump: &str) -> DatabaseHandle {
        build_database(&spec(dump), ExecLimits::default()).unwrap()
    }

    #[test]
    fn empty_dump_builds() {
        let h = handle("");
        assert!(matches!(h.execute("SELECT 1"), ExecOutcome::Ok(_)));
        assert!(matches!(h.execute("SELECT * FROM t"), ExecOutcome::RuntimeError(_)));
    }

    #[test]
    fn count_rows_after_build() {
        let h = handle("CREATE TABLE t(a INT); INSERT INTO t VALUES (1),(2);");
        let d = h.execute("SELECT COUNT(*) FROM t").denotation().cloned().unwrap();
        assert_eq!(d.rows, vec![vec![Value::Integer(2)]]);
    }

    #[test]
    fn malformed_ddl_reports_statement_index() {
        let dump = "CREATE TABLE t(a INT);\nINSERT INTO t VALUES (1);\nCREATE TABLE u(a INT PRIMARY, b TEXT);\n";
        let err = build_database(&spec(dump), ExecLimits::default()).unwrap_err();
        match err {
            SandboxError::Build { statement_index, .. } => assert_eq!(statement_index, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn select_one() {
        let h = handle("");
        let d = h.execute("SELECT 1").denotation().cloned().unwrap();
        assert_eq!(d.columns, 1);
        assert_eq!(d.rows, vec![vec![Value::Integer(1)]]);
    }

    #[test]
    fn missing_column_is_runtime_error_naming_it() {
        let h = handle("CREATE TABLE t(a INT);");
        match h.execute("SELECT missing_col FROM t") {
            ExecOutcome::RuntimeError(m) => assert!(m.contains("missing_col"), "{m}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn garbage_is_syntax_error() {
        let h = handle("CREATE TABLE t(a INT);");
        assert!(matches!(h.execute("SELEC a FROM t"), ExecOutcome::SyntaxError(_)));
        assert!(matches!(h.execute("SELECT a FROM"), ExecOutcome::SyntaxError(_)));
        assert!(matches!(h.execute("   ;"), ExecOutcome::SyntaxError(_)));
    }

    #[test]
    fn mutations_rejected_and_state_unchanged() {
        let h = handle("CREATE TABLE t(a INT); INSERT INTO t VALUES (1);");
        for sql in [
            "INSERT INTO t VALUES (5)",
            "UPDATE t SET a = 9",
            "DELETE FROM t",
            "DROP TABLE t",
            "CREATE TABLE z(x)",
        ] {
            assert!(matches!(h.execute(sql), ExecOutcome::RuntimeError(_)), "{sql}");
        }
        let d = h.execute("SELECT a FROM t").denotation().cloned().unwrap();
        assert_eq!(d.rows, vec![vec![Value::Integer(1)]]);
    }

    #[test]
    fn multiple_statements_rejected() {
        let h = handle("CREATE TABLE t(a INT);");
        assert!(matches!(h.execute("SELECT 1; SELECT 2"), ExecOutcome::SyntaxError(_)));
        assert!(h.execute("SELECT 1;;").is_ok());
    }

    #[test]
    fn slow_query_times_out() {
        let dump = "CREATE TABLE t(x INT);\
            WITH RECURSIVE c(i) AS (SELECT 1 UNION ALL SELECT i + 1 FROM c WHERE i < 10000) \
            INSERT INTO t SELECT i FROM c;";
        let h = handle(dump);
        let n = h.execute("SELECT COUNT(*) FROM t").denotation().cloned().unwrap();
        assert_eq!(n.rows, vec![vec![Value::Integer(10_000)]]);
        let limits = ExecLimits { timeout_ms: 100, max_rows: 10 };
        let start = Instant::now();
        let out = h.execute_with("SELECT COUNT(*) FROM t a, t b, t c", &limits);
        assert_eq!(out, ExecOutcome::Timeout(100));
        assert!(start.elapsed() < Duration::from_secs(5));
        // The handle stays usable afterwards.
        assert!(h.execute("SELECT 1").is_ok());
    }

    #[test]
    fn truncation_flag() {
        let h = handle("CREATE TABLE t(a INT); INSERT INTO t VALUES (1),(2),(3);");
        let limits = ExecLimits { timeout_ms: 1000, max_rows: 2 };
        let d = h.execute_with("SELECT a FROM t", &limits).denotation().cloned().unwrap();
        assert!(d.truncated);
        assert_eq!(d.row_count(), 2);
        let exact = ExecLimits { timeout_ms: 1000, max_rows: 3 };
        assert!(!h.execute_with("SELECT a FROM t", &exact).denotation().unwrap().truncated);
    }

    #[test]
    fn dump_with_transaction_and_pragma() {
        let dump = "PRAGMA foreign_keys = ON;\nBEGIN TRANSACTION;\nCREATE TABLE t(a TEXT);\nINSERT INTO t VALUES('it''s');\nCOMMIT;\n";
        let h = handle(dump);
        let d = h.execute("SELECT a FROM t").denotation().cloned().unwrap();
        assert_eq!(d.rows, vec![vec![Value::Text("it's".into())]]);
    }

    #[test]
    fn sqlite_file_dump_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("db.sqlite");
        {
            let c = Connection::open(&path).unwrap();
            c.execute_batch(
                "CREATE TABLE \"a b\"(x INT, y REAL, z TEXT, w BLOB);\
                 INSERT INTO \"a b\" VALUES (1, 2.5, 'q''x', X'00ff'), (NULL, 0.1, NULL, NULL);\
                 CREATE INDEX ix ON \"a b\"(x);\
                 CREATE VIEW v AS SELECT x FROM \"a b\";",
            )
            .unwrap();
        }
        let dump = dump_sqlite_file(&path).unwrap();
        let h = handle(&dump);
        let d = h.execute("SELECT * FROM \"a b\" ORDER BY rowid").denotation().cloned().unwrap();
        assert_eq!(d.rows[0], vec![
            Value::Integer(1),
            Value::Real("2.5".into()),
            Value::Text("q'x".into()),
            Value::Blob(vec![0, 255]),
        ]);
        assert_eq!(d.rows[1][1], Value::Real("0.1".into()));
        assert!(h.execute("SELECT * FROM v").is_ok());
    }
}
