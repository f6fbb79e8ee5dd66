//! Panoptic label maps and class metadata shared by every module.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Semantic label for pixels that are excluded from every metric and loss.
pub const VOID: u16 = 255;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub id: u16,
    pub name: String,
    pub thing: bool,
}

/// Class table with the thing/stuff split. Stuff kernels follow the order of
/// [`ClassTable::stuff_ids`], thing class logits the order of
/// [`ClassTable::thing_ids`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTable {
    pub classes: Vec<ClassInfo>,
    pub ignore_label: u16,
}

impl ClassTable {
    /// Three stuff classes and two thing classes used by the synthetic data.
    pub fn synthetic() -> Self {
        let c = |id, name: &str, thing| ClassInfo {
            id,
            name: name.to_string(),
            thing,
        };
        Self {
            classes: vec![
                c(0, "sky", false),
                c(1, "ground", false),
                c(2, "wall", false),
                c(3, "box", true),
                c(4, "disc", true),
            ],
            ignore_label: VOID,
        }
    }

    pub fn is_thing(&self, id: u16) -> bool {
        self.classes.iter().any(|c| c.id == id && c.thing)
    }

    pub fn contains(&self, id: u16) -> bool {
        self.classes.iter().any(|c| c.id == id)
    }

    pub fn stuff_ids(&self) -> Vec<u16> {
        self.classes.iter().filter(|c| !c.thing).map(|c| c.id).collect()
    }

    pub fn thing_ids(&self) -> Vec<u16> {
        self.classes.iter().filter(|c| c.thing).map(|c| c.id).collect()
    }

    pub fn thing_index(&self, id: u16) -> Option<usize> {
        self.thing_ids().iter().position(|&c| c == id)
    }

    pub fn stuff_index(&self, id: u16) -> Option<usize> {
        self.stuff_ids().iter().position(|&c| c == id)
    }

    pub fn max_id(&self) -> u16 {
        self.classes.iter().map(|c| c.id).max().unwrap_or(0)
    }
}

/// Dense per-frame panoptic labelling: one semantic id and one instance id
/// per pixel, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PanopticFrame {
    pub height: usize,
    pub width: usize,
    pub semantic: Vec<u16>,
    pub instance: Vec<u16>,
    pub frame_index: usize,
}

impl PanopticFrame {
    pub fn filled(height: usize, width: usize, semantic: u16, frame_index: usize) -> Self {
        Self {
            height,
            width,
            semantic: vec![semantic; height * width],
            instance: vec![0; height * width],
            frame_index,
        }
    }

    pub fn len(&self) -> usize {
        self.semantic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.semantic.is_empty()
    }

    /// Checks the frame invariants: consistent buffer sizes, known classes,
    /// instance ids only on thing pixels, one class per instance id.
    pub fn validate(&self, classes: &ClassTable) -> Result<()> {
        let n = self.height * self.width;
        if self.semantic.len() != n || self.instance.len() != n {
            return Err(Error::Data(format!(
                "frame {}: buffers do not match {}x{}",
                self.frame_index, self.height, self.width
            )));
        }
        let mut owner: BTreeMap<u16, u16> = BTreeMap::new();
        for (&s, &i) in self.semantic.iter().zip(&self.instance) {
            if s != classes.ignore_label && !classes.contains(s) {
                return Err(Error::Data(format!(
                    "frame {}: unknown semantic id {s}",
                    self.frame_index
                )));
            }
            if i > 0 {
                if !classes.is_thing(s) {
                    return Err(Error::Data(format!(
                        "frame {}: instance {i} on non-thing class {s}",
                        self.frame_index
                    )));
                }
                if let Some(prev) = owner.insert(i, s) {
                    if prev != s {
                        return Err(Error::Data(format!(
                            "frame {}: instance {i} spans classes {prev} and {s}",
                            self.frame_index
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Pixel count of every (semantic, instance) segment.
    pub fn segment_areas(&self) -> BTreeMap<(u16, u16), usize> {
        let mut out = BTreeMap::new();
        for (&s, &i) in self.semantic.iter().zip(&self.instance) {
            *out.entry((s, i)).or_insert(0) += 1;
        }
        out
    }

    /// Instance ids present in this frame (excluding 0).
    pub fn instance_ids(&self) -> Vec<u16> {
        let mut ids: Vec<u16> = self.instance.iter().copied().filter(|&i| i > 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// A labelled video: frames with track-consistent instance ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VideoAnnotation {
    pub frames: Vec<PanopticFrame>,
    pub classes: ClassTable,
}

impl VideoAnnotation {
    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.frames.first() else {
            return Ok(());
        };
        for f in &self.frames {
            if f.height != first.height || f.width != first.width {
                return Err(Error::Data(format!(
                    "frame {} is {}x{}, expected {}x{}",
                    f.frame_index, f.height, f.width, first.height, first.width
                )));
            }
            f.validate(&self.classes)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_rejects_instances_on_stuff() {
        let classes = ClassTable::synthetic();
        let mut f = PanopticFrame::filled(2, 2, 0, 0);
        f.validate(&classes).unwrap();
        f.instance[1] = 3;
        assert!(f.validate(&classes).is_err());
        f.semantic[1] = 3;
        f.validate(&classes).unwrap();
        f.semantic[2] = 4;
        f.instance[2] = 3;
        assert!(f.validate(&classes).is_err());
    }

    #[test]
    fn class_table_orders() {
        let c = ClassTable::synthetic();
        assert_eq!(c.stuff_ids(), vec![0, 1, 2]);
        assert_eq!(c.thing_ids(), vec![3, 4]);
        assert_eq!(c.thing_index(4), Some(1));
        assert!(!c.is_thing(VOID));
    }
}
