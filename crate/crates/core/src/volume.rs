//! Intensity volumes and label maps on a `(D, H, W)` voxel grid, stored
//! row-major with `W` fastest.

use crate::error::{Error, Result};

/// Largest class id: background plus four structures.
pub const MAX_CLASS: u8 = 4;
pub const NUM_CLASSES: usize = MAX_CLASS as usize + 1;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["background", "uterine_wall", "uterine_cavity", "myoma", "nabothian_cyst"];

/// Row labels used in rendered reports.
pub const CLASS_LABELS: [&str; NUM_CLASSES] = ["Background", "Uterine Wall", "Uterine Cavity", "Myoma", "Nabothian Cyst"];

pub fn class_name(class: usize) -> &'static str {
    CLASS_NAMES.get(class).copied().unwrap_or("unknown")
}

/// On-disk element type.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum DataType {
    Uint8,
    Int16,
    #[default]
    Float32,
}

impl DataType {
    pub fn code(self) -> i16 {
        match self {
            DataType::Uint8 => 2,
            DataType::Int16 => 4,
            DataType::Float32 => 16,
        }
    }

    pub fn from_code(code: i16) -> Option<Self> {
        match code {
            2 => Some(DataType::Uint8),
            4 => Some(DataType::Int16),
            16 => Some(DataType::Float32),
            _ => None,
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            DataType::Uint8 => 1,
            DataType::Int16 => 2,
            DataType::Float32 => 4,
        }
    }
}

/// Header bytes 252..328 (qform/sform codes, quaternion, affine rows),
/// carried through unchanged and never applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Orientation(pub [u8; 76]);

impl Default for Orientation {
    fn default() -> Self {
        Orientation([0; 76])
    }
}

fn check_grid(extents: [usize; 3], spacing: [f32; 3], len: usize) -> Result<()> {
    if extents.iter().any(|&e| e == 0) {
        return Err(Error::Invalid(format!("extents must be positive, got {extents:?}")));
    }
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::Invalid(format!("spacing must be positive, got {spacing:?}")));
    }
    let n: usize = extents.iter().product();
    if n != len {
        return Err(Error::Shape(format!("extents {extents:?} need {n} voxels, got {len}")));
    }
    Ok(())
}

#[inline]
pub fn voxel_index(extents: [usize; 3], d: usize, h: usize, w: usize) -> usize {
    (d * extents[1] + h) * extents[2] + w
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    extents: [usize; 3],
    spacing: [f32; 3],
    data: Vec<f32>,
    pub dtype: DataType,
    pub orientation: Orientation,
}

impl Volume {
    pub fn new(extents: [usize; 3], spacing: [f32; 3], data: Vec<f32>) -> Result<Self> {
        check_grid(extents, spacing, data.len())?;
        Ok(Self {
            extents,
            spacing,
            data,
            dtype: DataType::Float32,
            orientation: Orientation::default(),
        })
    }

    pub fn with_dtype(mut self, dtype: DataType) -> Self {
        self.dtype = dtype;
        self
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, d: usize, h: usize, w: usize) -> f32 {
        self.data[voxel_index(self.extents, d, h, w)]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    extents: [usize; 3],
    spacing: [f32; 3],
    labels: Vec<u8>,
    pub orientation: Orientation,
}

impl LabelMap {
    pub fn new(extents: [usize; 3], spacing: [f32; 3], labels: Vec<u8>) -> Result<Self> {
        check_grid(extents, spacing, labels.len())?;
        if let Some((i, &v)) = labels.iter().enumerate().find(|(_, &v)| v > MAX_CLASS) {
            return Err(Error::Invalid(format!("voxel {i} holds class {v}, maximum is {MAX_CLASS}")));
        }
        Ok(Self {
            extents,
            spacing,
            labels,
            orientation: Orientation::default(),
        })
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, d: usize, h: usize, w: usize) -> u8 {
        self.labels[voxel_index(self.extents, d, h, w)]
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    /// Number of voxels not labelled background.
    pub fn foreground(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }
}

/// One image with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub id: String,
    pub image: Volume,
    pub labels: LabelMap,
}

impl Case {
    pub fn new(id: impl Into<String>, image: Volume, labels: LabelMap) -> Result<Self> {
        let id = id.into();
        if image.extents() != labels.extents() {
            return Err(Error::Shape(format!(
                "case {id}: image extents {:?} differ from label extents {:?}",
                image.extents(),
                labels.extents()
            )));
        }
        Ok(Self { id, image, labels })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_range_enforced() {
        assert!(LabelMap::new([1, 1, 2], [1.0; 3], vec![0, 4]).is_ok());
        assert!(LabelMap::new([1, 1, 2], [1.0; 3], vec![0, 5]).is_err());
    }

    #[test]
    fn grid_validation() {
        assert!(Volume::new([2, 2, 2], [1.0; 3], vec![0.0; 7]).is_err());
        assert!(Volume::new([0, 2, 2], [1.0; 3], vec![]).is_err());
        assert!(Volume::new([1, 1, 1], [0.0, 1.0, 1.0], vec![0.0]).is_err());
    }

    #[test]
    fn indexing_is_w_fastest() {
        let v = Volume::new([2, 2, 3], [1.0; 3], (0..12).map(|i| i as f32).collect()).unwrap();
        assert_eq!(v.get(1, 0, 2), 8.0);
    }
}
