//! Netlist fixture corpus shared by the corpus tests and the acceptance suite.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use graysim::netlist::{parse, prepare, FsLoader, NetlistError};

/// `.net` files of one fixture class, sorted by name.
pub fn fixtures(kind: &str) -> Vec<PathBuf> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures/netlists")
        .join(kind);
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "net"))
        .collect();
    files.sort();
    files
}

/// Parse, then build against the fixture's own directory.
pub fn load(path: &Path) -> Result<(), NetlistError> {
    let doc = parse(&fs::read_to_string(path).unwrap())?;
    prepare(&doc, &mut FsLoader::for_netlist(path)).map(|_| ())
}

/// `# expect L:C` header of a malformed fixture.
pub fn expected_position(text: &str) -> (usize, usize) {
    let head = text
        .lines()
        .next()
        .and_then(|l| l.strip_prefix("# expect "))
        .expect("`# expect L:C` header");
    let (l, c) = head.split_once(':').expect("L:C");
    (l.trim().parse().unwrap(), c.trim().parse().unwrap())
}

/// A valid fixture must parse, reprint to an equal document and build.
pub fn check_valid(path: &Path) -> Result<(), String> {
    let text = fs::read_to_string(path).unwrap();
    let doc = parse(&text).map_err(|e| e.to_string())?;
    match parse(&doc.to_string()) {
        Ok(again) if again == doc => {}
        Ok(_) => return Err("round trip changed the document".into()),
        Err(e) => return Err(format!("reprint does not parse: {e}")),
    }
    load(path).map_err(|e| e.to_string())
}

/// A malformed fixture must fail to parse at its header position.
pub fn check_malformed(path: &Path) -> Result<(), String> {
    let text = fs::read_to_string(path).unwrap();
    let want = expected_position(&text);
    match parse(&text) {
        Ok(_) => Err("accepted".into()),
        Err(e) => match e.span() {
            Some(s) if (s.line, s.col) == want => Ok(()),
            _ => Err(format!("want {}:{}, got {e}", want.0, want.1)),
        },
    }
}

/// A structurally singular fixture must parse and then be rejected when built.
pub fn check_nonsquare(path: &Path) -> Result<(), String> {
    match load(path) {
        Err(NetlistError::NotSquare(_)) => Ok(()),
        other => Err(format!("expected a structural rejection, got {other:?}")),
    }
}

/// Runs `check` over a fixture class; one message per failing file.
pub fn failures(kind: &str, check: fn(&Path) -> Result<(), String>) -> (usize, Vec<String>) {
    let files = fixtures(kind);
    let bad = files
        .iter()
        .filter_map(|p| {
            check(p)
                .err()
                .map(|e| format!("{}: {e}", p.file_name().unwrap().to_string_lossy()))
        })
        .collect();
    (files.len(), bad)
}
