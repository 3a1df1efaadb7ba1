use crate::data::ClusterSizes;
use crate::error::GofError;

/// Prefix of the pooled indicator column names added to the augmented model.
pub const INDICATOR_PREFIX: &str = "_gof_I";

/// How the number of groups is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GroupRule {
    /// `G = min(10, n_min)` over level-2 cluster sizes.
    #[default]
    DataDriven,
    Forced(usize),
}

impl std::fmt::Display for GroupRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GroupRule::DataDriven => write!(f, "data_driven"),
            GroupRule::Forced(g) => write!(f, "forced({g})"),
        }
    }
}

pub fn select_group_count(level2_sizes: &ClusterSizes, rule: GroupRule) -> Result<usize, GofError> {
    match rule {
        GroupRule::Forced(g) if g < 2 => Err(GofError::BadGroupCount(g)),
        GroupRule::Forced(g) => Ok(g),
        GroupRule::DataDriven => {
            let n_min = level2_sizes.min().unwrap_or(0);
            if n_min < 2 {
                Err(GofError::TooFewObservations { n_min })
            } else {
                Ok(n_min.min(10))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupAssignment {
    pub g: usize,
    /// Group label in `1..=g` per row.
    pub group_of_row: Vec<usize>,
    /// `per_cluster_counts[k][g - 1]`: rows of level-2 cluster `k` in group `g`.
    pub per_cluster_counts: Vec<Vec<usize>>,
}

impl GroupAssignment {
    pub fn has_empty_cell(&self) -> bool {
        self.per_cluster_counts.iter().any(|c| c.contains(&0))
    }
}

/// Ranks rows by `p_hat` within each level-2 cluster (ties keep row order)
/// and gives rank `r` of `n_j` the group `⌊(r−1)G/n_j⌋ + 1`.
pub fn assign_groups(p_hat: &[f64], level2_ids: &[usize], g: usize) -> GroupAssignment {
    assert_eq!(p_hat.len(), level2_ids.len());
    let n_clusters = level2_ids.iter().copied().max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_clusters];
    for (i, &k) in level2_ids.iter().enumerate() {
        members[k].push(i);
    }
    let mut group_of_row = vec![0; p_hat.len()];
    let mut per_cluster_counts = vec![vec![0; g]; n_clusters];
    for (k, rows) in members.iter_mut().enumerate() {
        rows.sort_by(|&a, &b| p_hat[a].total_cmp(&p_hat[b]));
        let n = rows.len();
        for (r, &i) in rows.iter().enumerate() {
            let grp = r * g / n + 1;
            group_of_row[i] = grp;
            per_cluster_counts[k][grp - 1] += 1;
        }
    }
    GroupAssignment {
        g,
        group_of_row,
        per_cluster_counts,
    }
}

/// Pooled indicator columns `I2..IG`; group 1 is the reference.
pub fn build_indicators(ga: &GroupAssignment) -> Vec<(String, Vec<f64>)> {
    (2..=ga.g)
        .map(|grp| {
            let col = ga.group_of_row.iter().map(|&r| f64::from(u8::from(r == grp))).collect();
            (format!("{INDICATOR_PREFIX}{grp}"), col)
        })
        .collect()
}
