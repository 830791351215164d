//! CSV files tagged with their manifest hash.

use crate::CliError;
use std::fs::File;
use std::io::Write;
use std::path::Path;

/// Open `dir/name` for CSV output, writing the `# manifest=<hash>` line and
/// the header row.
pub fn csv_writer(dir: &Path, name: &str, hash: &str, header: &[String]) -> Result<csv::Writer<File>, CliError> {
    let mut f = File::create(dir.join(name))?;
    writeln!(f, "# manifest={hash}")?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record(header)?;
    Ok(w)
}

/// Column names from string literals.
pub fn header(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|c| c.to_string()).collect()
}

/// Shortest round-trip decimal form.
pub fn num(v: f64) -> String {
    format!("{v}")
}
