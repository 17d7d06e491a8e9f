//! Persistence and ingestion: network specs, weight blobs, IDX datasets,
//! synthetic data and reports.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub mod idx;
pub mod netspec;
pub mod report;
pub mod synthetic;
pub mod weights;

pub use idx::{load_idx, write_idx_images, write_idx_labels};
pub use netspec::{load_netspec, parse_netspec, save_netspec, serialize_netspec};
pub use report::{
    history_to_csv, loss_curves_to_csv, report_to_csv, trace_to_csv, write_history, write_loss_curves, write_report,
    write_trace, ReportFormat,
};
pub use synthetic::{gen_synthetic, SyntheticKind};
pub use weights::{decode_weights, encode_weights, load_weights, save_weights};

/// Images `[n, c, h, w]` with optional class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.dim0()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Subtract the per-pixel mean image of the set.
    pub fn subtract_mean(&mut self) {
        let n = self.len();
        if n == 0 {
            return;
        }
        let per = self.images.stride0();
        let mut mean = vec![0.0f64; per];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(self.images.row(i)) {
                *m += f64::from(*v);
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        for i in 0..n {
            for (v, m) in self.images.row_mut(i).iter_mut().zip(&mean) {
                *v = (f64::from(*v) - m) as f32;
            }
        }
    }

    /// The first `count` images (or all of them).
    pub fn take(&self, count: usize) -> Dataset {
        let k = count.min(self.len());
        Dataset {
            images: self.images.slice0(0, k),
            labels: self.labels.as_ref().map(|l| l[..k].to_vec()),
        }
    }
}

/// Write `bytes` to a temporary file next to `path` and rename it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}
