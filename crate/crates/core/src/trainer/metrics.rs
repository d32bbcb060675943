use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::mpsc::{sync_channel, SyncSender};
use std::thread::JoinHandle;

use super::TrainStepRecord;

pub const METRICS_HEADER: &str = "step,l_pred,l_reg,l_inter,l_ssl";

/// One CSV row. Floats use the shortest representation that round-trips.
pub fn metrics_row(r: &TrainStepRecord) -> String {
    let l = &r.losses;
    format!("{},{},{},{},{}", r.step, l.l_pred, l.l_reg, l.l_inter, l.l_ssl)
}

/// Background CSV writer fed through a bounded queue; a full queue blocks
/// the sender.
pub struct MetricsWriter {
    tx: Option<SyncSender<String>>,
    handle: Option<JoinHandle<std::io::Result<()>>>,
}

impl MetricsWriter {
    pub fn create(path: impl AsRef<Path>, capacity: usize) -> std::io::Result<Self> {
        Self::with_header(path, METRICS_HEADER, capacity)
    }

    pub fn with_header(path: impl AsRef<Path>, header: &str, capacity: usize) -> std::io::Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{header}")?;
        let (tx, rx) = sync_channel::<String>(capacity.max(1));
        let handle = std::thread::spawn(move || {
            for line in rx {
                writeln!(out, "{line}")?;
            }
            out.flush()
        });
        Ok(Self { tx: Some(tx), handle: Some(handle) })
    }

    pub fn push(&self, record: &TrainStepRecord) -> std::io::Result<()> {
        self.push_row(metrics_row(record))
    }

    pub fn push_row(&self, row: String) -> std::io::Result<()> {
        let tx = self.tx.as_ref().expect("writer already finished");
        tx.send(row).map_err(|_| std::io::Error::new(std::io::ErrorKind::BrokenPipe, "metrics writer stopped"))
    }

    /// Flushes and joins the writer thread.
    pub fn finish(mut self) -> std::io::Result<()> {
        self.close()
    }

    fn close(&mut self) -> std::io::Result<()> {
        drop(self.tx.take());
        match self.handle.take() {
            Some(h) => h.join().unwrap_or_else(|_| Err(std::io::Error::other("metrics writer panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for MetricsWriter {
    fn drop(&mut self) {
        let _ = self.close();
    }
}
