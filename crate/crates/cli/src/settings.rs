//! Settings resolution and report files.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use dfq_core::config::{apply, load_overrides, parse_assignment, Overrides};
use dfq_core::write_file;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use crate::{Common, UsageError};

/// `defaults`, then the `--config` file, then each `--set`, in that order.
pub fn resolve<T: Serialize + DeserializeOwned>(defaults: &T, common: &Common) -> Result<T> {
    let mut overrides: Overrides = match &common.config {
        Some(path) => load_overrides(path)?,
        None => Vec::new(),
    };
    for s in &common.set {
        overrides.push(parse_assignment(s).map_err(|e| UsageError(e.to_string()))?);
    }
    apply(defaults, &overrides).map_err(|e| UsageError(e.to_string()).into())
}

/// Where a command writes its outputs.
pub struct Outputs<'a> {
    common: &'a Common,
    started: Instant,
}

impl<'a> Outputs<'a> {
    pub fn new(common: &'a Common) -> Self {
        Outputs {
            common,
            started: Instant::now(),
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.common.report_dir.join(name)
    }

    pub fn write(&self, path: &Path, bytes: &[u8]) -> Result<()> {
        write_file(path, bytes, self.common.overwrite)?;
        log::info!("wrote {}", path.display());
        Ok(())
    }

    /// Write `<report-dir>/<command>.json`.
    ///
    /// `results` must be a pure function of the inputs; wall-clock
    /// measurements go in `timing`, which sits beside it with the timestamp.
    pub fn report(
        &self,
        command: &str,
        config: &impl Serialize,
        results: &impl Serialize,
        timing: Value,
    ) -> Result<PathBuf> {
        let finished_at = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        let mut timing = timing;
        if let Value::Object(m) = &mut timing {
            m.insert("total".into(), json!(self.started.elapsed().as_secs_f64()));
        }
        let doc = json!({
            "command": command,
            "config": config,
            "results": results,
            "timing": timing,
            "finished_at": finished_at,
        });
        let path = self.path(&format!("{command}.json"));
        let text = serde_json::to_string_pretty(&doc).context("serializing report")?;
        self.write(&path, (text + "\n").as_bytes())?;
        Ok(path)
    }
}
