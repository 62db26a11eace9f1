use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, MaskVolume};

/// `2|X∩Y| / (|X| + |Y|)`; two empty masks score 1.
pub fn dice(x: &MaskVolume, y: &MaskVolume) -> Result<f64> {
    if !x.geometry().same_grid(y.geometry()) {
        return Err(Error::GeometryMismatch("dice operands differ in geometry".into()));
    }
    let (mut both, mut nx, mut ny) = (0usize, 0usize, 0usize);
    for (&a, &b) in x.data().iter().zip(y.data()) {
        nx += a as usize;
        ny += b as usize;
        both += (a && b) as usize;
    }
    if nx + ny == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (nx + ny) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupScore {
    pub group: u8,
    pub dice: f64,
    pub predicted_voxels: usize,
    pub truth_voxels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseScores {
    pub case: String,
    pub groups: Vec<GroupScore>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub cases: Vec<CaseScores>,
}

impl DiceReport {
    /// Scores every group present in either volume.
    pub fn add_case(&mut self, case: impl Into<String>, predicted: &LabelVolume, truth: &LabelVolume) -> Result<()> {
        let mut ids: Vec<u8> = predicted.labels().iter().chain(truth.labels()).copied().collect();
        ids.sort_unstable();
        ids.dedup();
        let mut groups = Vec::with_capacity(ids.len());
        for g in ids {
            let p = predicted.mask_of(g);
            let t = truth.mask_of(g);
            groups.push(GroupScore {
                group: g,
                dice: dice(&p, &t)?,
                predicted_voxels: p.count(),
                truth_voxels: t.count(),
            });
        }
        self.cases.push(CaseScores {
            case: case.into(),
            groups,
        });
        Ok(())
    }

    pub fn groups(&self) -> Vec<u8> {
        let mut ids: Vec<u8> = self
            .cases
            .iter()
            .flat_map(|c| c.groups.iter().map(|g| g.group))
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Mean Dice of a group over the cases that score it.
    pub fn average(&self, group: u8) -> Option<f64> {
        let v: Vec<f64> = self
            .cases
            .iter()
            .filter_map(|c| c.groups.iter().find(|g| g.group == group).map(|g| g.dice))
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// One row per case plus an `AVG` row, group columns, percentages.
    pub fn to_table(&self) -> String {
        let ids = self.groups();
        let width = self.cases.iter().map(|c| c.case.len()).max().unwrap_or(0).max(4);
        let mut out = format!("{:<width$}", "case");
        for g in &ids {
            out.push_str(&format!(" {:>9}", format!("group {g}")));
        }
        out.push('\n');
        let cell = |v: Option<f64>| v.map_or_else(|| format!(" {:>9}", "-"), |d| format!(" {:>9.2}", 100.0 * d));
        for c in &self.cases {
            out.push_str(&format!("{:<width$}", c.case));
            for g in &ids {
                out.push_str(&cell(c.groups.iter().find(|s| s.group == *g).map(|s| s.dice)));
            }
            out.push('\n');
        }
        out.push_str(&format!("{:<width$}", "AVG"));
        for g in &ids {
            out.push_str(&cell(self.average(*g)));
        }
        out.push('\n');
        out
    }
}
