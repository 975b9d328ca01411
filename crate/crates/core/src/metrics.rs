//! IoU, backward / forward transfer, and part-count majority voting.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{HpptError, Result};
use crate::prompt_tree::ClassId;
use crate::stream::Taxonomy;

/// `|pred ∩ gt| / |pred ∪ gt|`; two empty masks score 1.
pub fn iou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    let mut c = IouCounts::default();
    c.add(pred, gt)?;
    Ok(c.iou())
}

/// Intersection and union counts accumulated over many masks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IouCounts {
    pub intersection: u64,
    pub union: u64,
}

impl IouCounts {
    pub fn add(&mut self, pred: &[bool], gt: &[bool]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(HpptError::Dimension(format!(
                "mask sizes differ: {} vs {}",
                pred.len(),
                gt.len()
            )));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            self.intersection += u64::from(p && g);
            self.union += u64::from(p || g);
        }
        Ok(())
    }

    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

/// `IoU_t(c)` per episode plus the individually trained baseline `IndIoU(c)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IoUTable {
    pub episodes: usize,
    /// `values[&c][t - 1]`
    pub values: BTreeMap<ClassId, Vec<Option<f64>>>,
    pub ind: BTreeMap<ClassId, f64>,
}

impl IoUTable {
    pub fn new(episodes: usize) -> Self {
        IoUTable {
            episodes,
            ..IoUTable::default()
        }
    }

    pub fn set(&mut self, t: usize, class: ClassId, value: f64) -> Result<()> {
        if t < 1 || t > self.episodes {
            return Err(HpptError::Range(format!("episode {t} outside [1, {}]", self.episodes)));
        }
        if !(0.0..=1.0).contains(&value) {
            return Err(HpptError::Range(format!("IoU {value} outside [0, 1]")));
        }
        self.values.entry(class).or_insert_with(|| vec![None; self.episodes])[t - 1] = Some(value);
        Ok(())
    }

    pub fn set_ind(&mut self, class: ClassId, value: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&value) {
            return Err(HpptError::Range(format!("IoU {value} outside [0, 1]")));
        }
        self.ind.insert(class, value);
        Ok(())
    }

    pub fn get(&self, t: usize, class: ClassId) -> Option<f64> {
        self.values.get(&class).and_then(|v| v.get(t.wrapping_sub(1)).copied().flatten())
    }

    fn require(&self, t: usize, class: ClassId) -> Result<f64> {
        self.get(t, class)
            .ok_or_else(|| HpptError::MissingData(format!("no IoU for class {class} at episode {t}")))
    }

    /// Rows are classes, columns are episodes then `ind`; empty cells are absent values.
    pub fn write_csv<W: Write>(&self, w: W, names: &dyn Fn(ClassId) -> String) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["class".to_string()];
        header.extend((1..=self.episodes).map(|t| t.to_string()));
        header.push("ind".into());
        out.write_record(&header).map_err(csv_error)?;
        let mut classes: Vec<ClassId> = self.values.keys().copied().collect();
        classes.extend(self.ind.keys().filter(|c| !self.values.contains_key(c)));
        classes.sort();
        for c in classes {
            let mut row = vec![names(c)];
            for t in 1..=self.episodes {
                row.push(self.get(t, c).map(|v| format!("{v:.6}")).unwrap_or_default());
            }
            row.push(self.ind.get(&c).map(|v| format!("{v:.6}")).unwrap_or_default());
            out.write_record(&row).map_err(csv_error)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn csv_error(e: csv::Error) -> HpptError {
    HpptError::Format(format!("csv: {e}"))
}

/// Mean of `IoU_t(c) - IoU_{t-1}(c)` over old and regular classes.
pub fn bwt(table: &IoUTable, t: usize, taxonomy: &Taxonomy) -> Result<f64> {
    if t < 2 {
        return Err(HpptError::Range("backward transfer needs t >= 2".into()));
    }
    let tracked: Vec<ClassId> = taxonomy.old.union(&taxonomy.regular).copied().collect();
    if tracked.is_empty() {
        return Err(HpptError::MissingData(format!("episode {t} has no old or regular class")));
    }
    let mut total = 0.0;
    for &c in &tracked {
        total += table.require(t, c)? - table.require(t - 1, c)?;
    }
    Ok(total / tracked.len() as f64)
}

/// Mean of `IoU_t(c) - IndIoU(c)` over new classes.
pub fn fwt(table: &IoUTable, t: usize, taxonomy: &Taxonomy) -> Result<f64> {
    if taxonomy.new.is_empty() {
        return Err(HpptError::MissingData(format!("episode {t} has no new class")));
    }
    let mut total = 0.0;
    for &c in &taxonomy.new {
        let base = table
            .ind
            .get(&c)
            .ok_or_else(|| HpptError::MissingData(format!("no individual-training IoU for class {c}")))?;
        total += table.require(t, c)? - base;
    }
    Ok(total / taxonomy.new.len() as f64)
}

/// Most frequent part count per class; ties go to the smaller count.
pub fn majority_vote_part_count(
    responses: &BTreeMap<ClassId, BTreeMap<usize, u64>>,
) -> Result<BTreeMap<ClassId, usize>> {
    let mut out = BTreeMap::new();
    for (&c, votes) in responses {
        let mut best: Option<(usize, u64)> = None;
        for (&count, &freq) in votes {
            if freq > 0 && best.is_none_or(|(_, f)| freq > f) {
                best = Some((count, freq));
            }
        }
        let (count, _) = best.ok_or_else(|| HpptError::MissingData(format!("no responses for class {c}")))?;
        out.insert(c, count);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode: usize,
    pub bwt: Option<f64>,
    pub fwt: Option<f64>,
    pub per_class_iou: BTreeMap<String, f64>,
    pub taxonomy: BTreeMap<String, Vec<String>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn tax(new: &[u16], regular: &[u16], old: &[u16]) -> Taxonomy {
        let s = |v: &[u16]| v.iter().map(|&i| ClassId(i)).collect::<BTreeSet<_>>();
        Taxonomy {
            new: s(new),
            regular: s(regular),
            old: s(old),
        }
    }

    #[test]
    fn iou_examples() {
        let m = [true, true, false, true];
        assert_eq!(iou(&m, &m).unwrap(), 1.0);
        assert_eq!(iou(&[true, false], &[false, true]).unwrap(), 0.0);
        assert_eq!(iou(&[true, false, false, false], &[true, true, false, false]).unwrap(), 0.5);
        assert_eq!(iou(&[false; 3], &[false; 3]).unwrap(), 1.0);
        assert_eq!(iou(&[false; 3], &[true, false, false]).unwrap(), 0.0);
        assert!(matches!(iou(&[true], &[true, false]), Err(HpptError::Dimension(_))));
    }

    #[test]
    fn bwt_examples() {
        let taxonomy = tax(&[], &[1, 2], &[3]);
        let mut t = IoUTable::new(2);
        for c in 1..=3 {
            t.set(1, ClassId(c), 0.5).unwrap();
            t.set(2, ClassId(c), 0.5).unwrap();
        }
        assert_eq!(bwt(&t, 2, &taxonomy).unwrap(), 0.0);
        t.set(2, ClassId(2), 0.6).unwrap();
        assert!((bwt(&t, 2, &taxonomy).unwrap() - 0.1 / 3.0).abs() < 1e-12);
        for c in 1..=3 {
            t.set(2, ClassId(c), 0.4).unwrap();
        }
        assert!(bwt(&t, 2, &taxonomy).unwrap() < 0.0);
        let mut gap = IoUTable::new(2);
        gap.set(1, ClassId(1), 0.3).unwrap();
        let err = bwt(&gap, 2, &taxonomy).unwrap_err();
        assert!(matches!(err, HpptError::MissingData(ref m) if m.contains("c1") && m.contains("episode 2")));
    }

    #[test]
    fn fwt_examples() {
        let taxonomy = tax(&[1, 2, 3], &[], &[]);
        let mut t = IoUTable::new(2);
        for (c, now, base) in [(1, 0.53, 0.5), (2, 0.49, 0.5), (3, 0.51, 0.5)] {
            t.set(2, ClassId(c), now).unwrap();
            t.set_ind(ClassId(c), base).unwrap();
        }
        assert!((fwt(&t, 2, &taxonomy).unwrap() - 0.01).abs() < 1e-12);
        let mut eq = IoUTable::new(2);
        eq.set(2, ClassId(1), 0.4).unwrap();
        eq.set_ind(ClassId(1), 0.4).unwrap();
        assert_eq!(fwt(&eq, 2, &tax(&[1], &[], &[])).unwrap(), 0.0);
        let mut missing = IoUTable::new(2);
        missing.set(2, ClassId(1), 0.4).unwrap();
        assert!(matches!(fwt(&missing, 2, &tax(&[1], &[], &[])), Err(HpptError::MissingData(_))));
    }

    #[test]
    fn vote_examples() {
        let r: BTreeMap<ClassId, BTreeMap<usize, u64>> = [
            (ClassId(1), [(1, 294), (2, 103), (3, 52)].into()),
            (ClassId(2), [(1, 205), (2, 1257), (3, 92)].into()),
            (ClassId(3), [(1, 10), (2, 10)].into()),
        ]
        .into();
        let v = majority_vote_part_count(&r).unwrap();
        assert_eq!(v[&ClassId(1)], 1);
        assert_eq!(v[&ClassId(2)], 2);
        assert_eq!(v[&ClassId(3)], 1);
        let empty: BTreeMap<ClassId, BTreeMap<usize, u64>> = [(ClassId(1), BTreeMap::new())].into();
        assert!(matches!(majority_vote_part_count(&empty), Err(HpptError::MissingData(_))));
    }

    #[test]
    fn csv_layout() {
        let mut t = IoUTable::new(2);
        t.set(1, ClassId(1), 0.25).unwrap();
        t.set_ind(ClassId(2), 0.5).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf, &|c| format!("k{}", c.0)).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "class,1,2,ind\nk1,0.250000,,\nk2,,,0.500000\n");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn iou_is_symmetric(a in proptest::collection::vec(any::<bool>(), 1..40), seed in any::<u64>()) {
                let b: Vec<bool> = a.iter().enumerate().map(|(i, &x)| x ^ ((seed >> (i % 64)) & 1 == 1)).collect();
                prop_assert_eq!(iou(&a, &b).unwrap(), iou(&b, &a).unwrap());
                prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
            }

            #[test]
            fn transfer_metrics_shift_with_current_entries(delta in -0.2f64..0.2) {
                let taxonomy = tax(&[4, 5], &[1, 2], &[3]);
                let mut t = IoUTable::new(2);
                for c in 1..=5u16 {
                    t.set(1, ClassId(c), 0.5).unwrap();
                    t.set(2, ClassId(c), 0.3 + 0.05 * f64::from(c)).unwrap();
                    t.set_ind(ClassId(c), 0.45).unwrap();
                }
                let (b0, f0) = (bwt(&t, 2, &taxonomy).unwrap(), fwt(&t, 2, &taxonomy).unwrap());
                let mut shifted = t.clone();
                for c in 1..=5u16 {
                    let v = t.get(2, ClassId(c)).unwrap();
                    shifted.set(2, ClassId(c), v + delta).unwrap();
                }
                prop_assert!((bwt(&shifted, 2, &taxonomy).unwrap() - b0 - delta).abs() < 1e-12);
                prop_assert!((fwt(&shifted, 2, &taxonomy).unwrap() - f0 - delta).abs() < 1e-12);
            }
        }
    }
}
