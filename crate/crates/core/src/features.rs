//! Per-image object features from one or more detectors ("views") and the
//! `.fvs` file format that carries them.
//!
//! ```text
//! "MTFV" | u32 version=1 | u32 M | per view: u32 m | u32 d | f32 payload (m×d, row-major)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor, NEG_INF};

pub const FEATURE_MAGIC: &[u8; 4] = b"MTFV";
pub const FEATURE_VERSION: u32 = 1;

/// M view matrices of shape mᵢ × dᵢ. Masks mark real objects (`true`) versus
/// batch padding (`false`).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureViews<T> {
    views: Vec<Tensor<T>>,
    aligned: bool,
    masks: Vec<Option<Vec<bool>>>,
}

impl<T: Real> FeatureViews<T> {
    pub fn new(views: Vec<Tensor<T>>, aligned: bool) -> Result<Self> {
        let n = views.len();
        Self::with_masks(views, aligned, vec![None; n])
    }

    pub fn with_masks(views: Vec<Tensor<T>>, aligned: bool, masks: Vec<Option<Vec<bool>>>) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::Data("feature views need at least one view".into()));
        }
        if masks.len() != views.len() {
            return Err(Error::Data("one mask slot per view required".into()));
        }
        for (v, m) in views.iter().zip(&masks) {
            if v.shape().len() != 2 {
                return Err(Error::Data(format!("view must be a matrix, got {:?}", v.shape())));
            }
            if let Some(m) = m {
                if m.len() != v.rows() {
                    return Err(Error::shape("object mask", v.shape(), &[m.len()]));
                }
                if !m.iter().any(|&x| x) {
                    return Err(Error::Data("object mask hides every object".into()));
                }
            }
        }
        if aligned {
            let m0 = views[0].rows();
            if views.iter().any(|v| v.rows() != m0) {
                return Err(Error::UnalignedViews);
            }
        }
        Ok(FeatureViews {
            views,
            aligned,
            masks,
        })
    }

    pub fn single(view: Tensor<T>) -> Result<Self> {
        Self::new(vec![view], true)
    }

    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    pub fn aligned(&self) -> bool {
        self.aligned
    }

    pub fn view(&self, i: usize) -> &Tensor<T> {
        &self.views[i]
    }

    pub fn views(&self) -> &[Tensor<T>] {
        &self.views
    }

    pub fn mask(&self, i: usize) -> Option<&[bool]> {
        self.masks[i].as_deref()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.views.iter().map(Tensor::cols).collect()
    }

    pub fn object_counts(&self) -> Vec<usize> {
        self.views.iter().map(Tensor::rows).collect()
    }

    /// The first `m` views, in order.
    pub fn first(&self, m: usize) -> Result<Self> {
        if m == 0 || m > self.views.len() {
            return Err(Error::Config(format!(
                "model expects {m} views, features provide {}",
                self.views.len()
            )));
        }
        Self::with_masks(
            self.views[..m].to_vec(),
            self.aligned,
            self.masks[..m].to_vec(),
        )
    }

    pub fn cast<U: Real>(&self) -> FeatureViews<U> {
        FeatureViews {
            views: self.views.iter().map(Tensor::cast).collect(),
            aligned: self.aligned,
            masks: self.masks.clone(),
        }
    }

    /// Zero-pads view `i` to `rows[i]` objects and masks the padding.
    pub fn pad_to(&self, rows: &[usize]) -> Result<Self> {
        let mut views = Vec::with_capacity(self.views.len());
        let mut masks = Vec::with_capacity(self.views.len());
        for (i, v) in self.views.iter().enumerate() {
            let target = rows[i];
            if target < v.rows() {
                return Err(Error::Data(format!(
                    "cannot pad view {i} with {} objects down to {target}",
                    v.rows()
                )));
            }
            let mut mask = self.masks[i].clone().unwrap_or_else(|| vec![true; v.rows()]);
            if target == v.rows() {
                views.push(v.clone());
                masks.push(self.masks[i].clone());
                continue;
            }
            let mut data = v.data().to_vec();
            data.resize(target * v.cols(), T::zero());
            mask.resize(target, false);
            views.push(Tensor::matrix(target, v.cols(), data)?);
            masks.push(Some(mask));
        }
        Self::with_masks(views, self.aligned, masks)
    }

    /// Permutes the rows of one view (and its mask).
    pub fn permute_view(&self, i: usize, perm: &[usize]) -> Self {
        let mut out = self.clone();
        out.views[i] = self.views[i].select_rows(perm);
        if let Some(m) = &self.masks[i] {
            out.masks[i] = Some(perm.iter().map(|&p| m[p]).collect());
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(FEATURE_MAGIC);
        buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.views.len() as u32).to_le_bytes());
        for v in &self.views {
            buf.extend_from_slice(&(v.rows() as u32).to_le_bytes());
            buf.extend_from_slice(&(v.cols() as u32).to_le_bytes());
            for x in v.data() {
                buf.extend_from_slice(&(x.f64() as f32).to_le_bytes());
            }
        }
        buf
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

impl FeatureViews<f32> {
    /// Reads a `.fvs` file. The alignment flag is not stored in the file and
    /// is supplied by the caller (it comes from the dataset manifest).
    pub fn read(path: &Path, aligned: bool) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, aligned, path)
    }

    pub fn from_bytes(bytes: &[u8], aligned: bool, path: &Path) -> Result<Self> {
        let mut r = crate::tensor::checkpoint_reader(bytes, path);
        if r.take(4)? != FEATURE_MAGIC {
            return Err(Error::format(path, "bad magic, expected MTFV"));
        }
        let version = r.u32()?;
        if version != FEATURE_VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let m = r.u32()? as usize;
        let mut views = Vec::with_capacity(m);
        for _ in 0..m {
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let data = r.f32s(rows * cols)?;
            views.push(Tensor::matrix(rows, cols, data).map_err(|e| Error::format(path, e.to_string()))?);
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after last view"));
        }
        Self::new(views, aligned).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Additive attention mask (`rows × mask.len()`) hiding padded keys.
pub fn key_mask<T: Real>(rows: usize, mask: &[bool]) -> Tensor<T> {
    let row: Vec<T> = mask
        .iter()
        .map(|&valid| if valid { T::zero() } else { T::of(NEG_INF) })
        .collect();
    let mut data = Vec::with_capacity(rows * mask.len());
    for _ in 0..rows {
        data.extend_from_slice(&row);
    }
    Tensor::matrix(rows, mask.len(), data).expect("non-empty mask")
}
