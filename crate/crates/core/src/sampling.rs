//! Similarity-ranked sample selection for the semantic sampling strategies.
//!
//! Every selector works on one row of a similarity matrix (the anchor against
//! the whole batch) and only looks at the ordering of the entries, so any
//! strictly increasing transform of the row yields the same indices. Ties are
//! broken by the lower batch index.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    Baseline,
    Srcl,
    NSam,
    Dynamic,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Baseline, Strategy::Srcl, Strategy::NSam, Strategy::Dynamic];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Baseline => "baseline",
            Strategy::Srcl => "srcl",
            Strategy::NSam => "nsam",
            Strategy::Dynamic => "dynamic",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" | "moco" => Ok(Strategy::Baseline),
            "srcl" => Ok(Strategy::Srcl),
            "nsam" | "n-sam" => Ok(Strategy::NSam),
            "dynamic" | "ds" => Ok(Strategy::Dynamic),
            other => Err(Error::Config(format!("unknown strategy `{other}`"))),
        }
    }
}

/// Strategy plus the counts that drive it. Epochs are 1-indexed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplingPlan {
    pub strategy: Strategy,
    /// Extra positives per anchor for SRCL.
    pub s_fixed: usize,
    /// Boosted tail negatives per anchor for N-Sam.
    pub t_fixed: usize,
    /// Number of plain contrastive epochs before SRCL/Dynamic sampling starts.
    pub activation_epoch: usize,
    pub s_start: usize,
    pub s_step: usize,
    pub s_min: usize,
    pub t_step: usize,
}

impl Default for SamplingPlan {
    fn default() -> Self {
        Self {
            strategy: Strategy::Baseline,
            s_fixed: 5,
            t_fixed: 50,
            activation_epoch: 5,
            s_start: 30,
            s_step: 5,
            s_min: 1,
            t_step: 20,
        }
    }
}

impl SamplingPlan {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.s_min < 1 {
            return Err(Error::Config("s_min must be at least 1".into()));
        }
        Ok(())
    }

    /// `(S_e, T_e)` for a 1-indexed epoch.
    pub fn schedule(&self, epoch: usize) -> (usize, usize) {
        let active = epoch > self.activation_epoch;
        match self.strategy {
            Strategy::Baseline => (0, 0),
            Strategy::Srcl if active => (self.s_fixed, 0),
            Strategy::Srcl => (0, 0),
            Strategy::NSam => (0, self.t_fixed),
            Strategy::Dynamic if active => {
                let k = epoch - self.activation_epoch;
                let s = self.s_start.saturating_sub(self.s_step * (k - 1)).max(self.s_min);
                (s, self.t_step * k)
            }
            Strategy::Dynamic => (0, 0),
        }
    }

    /// Largest `S_e + T_e` the schedule demands over epochs `1..=epochs`.
    pub fn peak_demand(&self, epochs: usize) -> usize {
        (1..=epochs)
            .map(|e| {
                let (s, t) = self.schedule(e);
                s + t
            })
            .max()
            .unwrap_or(0)
    }
}

/// Free function form of [`SamplingPlan::schedule`].
pub fn schedule(plan: &SamplingPlan, epoch: usize) -> (usize, usize) {
    plan.schedule(epoch)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SampleSelection {
    pub positives: Vec<usize>,
    pub negatives_boosted: Vec<usize>,
    pub epoch: usize,
}

impl SampleSelection {
    pub fn empty(epoch: usize) -> Self {
        Self {
            epoch,
            ..Self::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty() && self.negatives_boosted.is_empty()
    }

    /// Checks disjointness and anchor exclusion.
    pub fn check(&self, anchor: usize, n: usize) -> Result<()> {
        for &i in self.positives.iter().chain(&self.negatives_boosted) {
            if i == anchor {
                return Err(Error::Overlap(format!("anchor {anchor} selected")));
            }
            if i >= n {
                return Err(Error::Overlap(format!("index {i} outside batch of {n}")));
            }
        }
        if let Some(i) = self.positives.iter().find(|i| self.negatives_boosted.contains(i)) {
            return Err(Error::Overlap(format!(
                "index {i} is both positive and boosted negative"
            )));
        }
        Ok(())
    }
}

fn by_similarity_desc(row: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b))
}

fn by_similarity_asc(row: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b))
}

fn candidates(n: usize, anchor: usize, exclude: &[usize]) -> Vec<usize> {
    (0..n).filter(|&j| j != anchor && !exclude.contains(&j)).collect()
}

fn check_count(requested: usize, available: usize) -> Result<()> {
    if requested > available {
        return Err(Error::CountTooLarge { requested, available });
    }
    Ok(())
}

/// The `count` most similar non-anchor indices, most similar first.
pub fn select_positives(row: &[f64], anchor: usize, count: usize) -> Result<Vec<usize>> {
    let mut idx = candidates(row.len(), anchor, &[]);
    check_count(count, idx.len())?;
    idx.sort_by(by_similarity_desc(row));
    idx.truncate(count);
    Ok(idx)
}

/// The `count` least similar non-anchor indices, least similar first.
pub fn select_negatives_tail(row: &[f64], anchor: usize, count: usize) -> Result<Vec<usize>> {
    let mut idx = candidates(row.len(), anchor, &[]);
    check_count(count, idx.len())?;
    idx.sort_by(by_similarity_asc(row));
    idx.truncate(count);
    Ok(idx)
}

/// Indices from the middle of the descending ranking, growing outward.
///
/// The ranking `r[0..M)` covers every index except the anchor and `exclude`.
/// Emission starts at `r[M/2]` and alternates toward the more similar side
/// first: `r[c], r[c-1], r[c+1], r[c-2], ...`, continuing on whichever side
/// is left once the other runs out.
pub fn select_negatives_middle(row: &[f64], anchor: usize, count: usize, exclude: &[usize]) -> Result<Vec<usize>> {
    let mut ranking = candidates(row.len(), anchor, exclude);
    check_count(count, ranking.len())?;
    ranking.sort_by(by_similarity_desc(row));
    Ok(middle_out_positions(ranking.len(), count)
        .into_iter()
        .map(|p| ranking[p])
        .collect())
}

/// Ranking positions visited by the middle-out walk over `m` entries.
pub fn middle_out_positions(m: usize, count: usize) -> Vec<usize> {
    let target = count.min(m);
    let mut out = Vec::with_capacity(target);
    if target == 0 {
        return out;
    }
    let c = m / 2;
    out.push(c);
    let mut step = 1;
    while out.len() < target {
        if let Some(p) = c.checked_sub(step) {
            out.push(p);
            if out.len() == target {
                break;
            }
        }
        if c + step < m {
            out.push(c + step);
        }
        step += 1;
    }
    out
}

/// Builds the per-anchor selection for `plan` at `epoch` from a ranking row.
pub fn build_selection(plan: &SamplingPlan, epoch: usize, row: &[f64], anchor: usize) -> Result<SampleSelection> {
    if anchor >= row.len() {
        return Err(Error::ShapeMismatch(format!(
            "anchor {anchor} outside similarity row of length {}",
            row.len()
        )));
    }
    let (s, t) = plan.schedule(epoch);
    let mut sel = SampleSelection::empty(epoch);
    match plan.strategy {
        Strategy::Baseline => {}
        Strategy::Srcl => sel.positives = select_positives(row, anchor, s)?,
        Strategy::NSam => sel.negatives_boosted = select_negatives_tail(row, anchor, t)?,
        Strategy::Dynamic => {
            sel.positives = select_positives(row, anchor, s)?;
            sel.negatives_boosted = select_negatives_middle(row, anchor, t, &sel.positives)?;
        }
    }
    sel.check(anchor, row.len())?;
    Ok(sel)
}

#[cfg(test)]
mod tests {
    use super::*;

    const ROW: [f64; 4] = [1.0, 0.9, 0.1, 0.5];

    #[test]
    fn schedule_examples() {
        let dynamic = SamplingPlan::new(Strategy::Dynamic);
        assert_eq!(dynamic.schedule(5), (0, 0));
        assert_eq!(dynamic.schedule(6), (30, 20));
        assert_eq!(dynamic.schedule(7), (25, 40));
        assert_eq!(dynamic.schedule(11), (5, 120));
        assert_eq!(dynamic.schedule(12), (1, 140));
        assert_eq!(dynamic.schedule(13), (1, 160));
        let srcl = SamplingPlan::new(Strategy::Srcl);
        assert_eq!(srcl.schedule(4), (0, 0));
        assert_eq!(srcl.schedule(5), (0, 0));
        assert_eq!(srcl.schedule(6), (5, 0));
        assert_eq!(SamplingPlan::new(Strategy::NSam).schedule(0), (0, 50));
        assert_eq!(SamplingPlan::new(Strategy::Baseline).schedule(30), (0, 0));
    }

    #[test]
    fn positives_and_tail() {
        assert_eq!(select_positives(&ROW, 0, 2).unwrap(), vec![1, 3]);
        assert!(select_positives(&ROW, 0, 0).unwrap().is_empty());
        assert_eq!(select_positives(&[0.3; 5], 0, 2).unwrap(), vec![1, 2]);
        assert_eq!(select_negatives_tail(&ROW, 0, 1).unwrap(), vec![2]);
        assert!(select_negatives_tail(&ROW, 0, 0).unwrap().is_empty());
        let mut all = select_negatives_tail(&ROW, 0, 3).unwrap();
        all.sort();
        assert_eq!(all, vec![1, 2, 3]);
    }

    #[test]
    fn count_too_large() {
        assert!(matches!(
            select_positives(&ROW, 0, 4),
            Err(Error::CountTooLarge {
                requested: 4,
                available: 3
            })
        ));
        assert!(select_negatives_tail(&ROW, 0, 4).is_err());
        assert!(select_negatives_middle(&ROW, 0, 3, &[1]).is_err());
    }

    #[test]
    fn middle_out_walk() {
        assert_eq!(middle_out_positions(5, 3), vec![2, 1, 3]);
        assert_eq!(middle_out_positions(4, 4), vec![2, 1, 3, 0]);
        assert_eq!(middle_out_positions(5, 5), vec![2, 1, 3, 0, 4]);
        assert_eq!(middle_out_positions(6, 6), vec![3, 2, 4, 1, 5, 0]);
        assert!(middle_out_positions(5, 0).is_empty());
        assert_eq!(middle_out_positions(1, 1), vec![0]);
    }

    #[test]
    fn middle_selection_maps_ranking() {
        // descending ranking without anchor 0: [5 (0.8), 1 (0.6), 3 (0.4), 2 (0.2), 4 (0.0)]
        let row = [1.0, 0.6, 0.2, 0.4, 0.0, 0.8];
        assert_eq!(select_negatives_middle(&row, 0, 3, &[]).unwrap(), vec![3, 1, 2]);
        // excluding 5 before ranking: [1, 3, 2, 4], center position 2
        assert_eq!(select_negatives_middle(&row, 0, 2, &[5]).unwrap(), vec![2, 3]);
    }

    #[test]
    fn build_selection_per_strategy() {
        let row: Vec<f64> = (0..64).map(|i| ((i * 37) % 64) as f64 / 64.0).collect();
        assert!(build_selection(&SamplingPlan::new(Strategy::Baseline), 9, &row, 3)
            .unwrap()
            .is_empty());
        let nsam = build_selection(&SamplingPlan::new(Strategy::NSam), 0, &row, 3).unwrap();
        assert_eq!(nsam.negatives_boosted.len(), 50);
        assert!(nsam.positives.is_empty());
        let srcl = build_selection(&SamplingPlan::new(Strategy::Srcl), 6, &row, 3).unwrap();
        assert_eq!(srcl.positives.len(), 5);
        assert!(build_selection(&SamplingPlan::new(Strategy::Srcl), 5, &row, 3)
            .unwrap()
            .is_empty());
        assert!(build_selection(&SamplingPlan::new(Strategy::NSam), 0, &row, 64).is_err());
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("bogus".parse::<Strategy>().is_err());
    }
}
