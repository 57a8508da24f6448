//! Formation planning: hand out polygon vertices in priority order.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

use crate::geometry::{euclidean, Position};
use crate::world::{RobotId, TaskId};

/// Robot-to-vertex distances; rows follow the priority queue.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub rows: Vec<RobotId>,
    /// Vertex indices, one per column.
    pub cols: Vec<usize>,
    pub entries: Vec<Vec<f64>>,
}

impl DistanceMatrix {
    pub fn build(queue: &[(RobotId, Position)], vertices: &[(usize, Position)]) -> Self {
        Self {
            rows: queue.iter().map(|(id, _)| *id).collect(),
            cols: vertices.iter().map(|(k, _)| *k).collect(),
            entries: queue
                .iter()
                .map(|(_, p)| vertices.iter().map(|(_, v)| euclidean(*p, *v)).collect())
                .collect(),
        }
    }

    /// Square matrix whose columns are vertex indices `0..n`.
    pub fn from_rows(rows: Vec<RobotId>, entries: Vec<Vec<f64>>) -> Self {
        let n = entries.first().map_or(0, Vec::len);
        Self {
            rows,
            cols: (0..n).collect(),
            entries,
        }
    }

    pub fn get(&self, robot: RobotId, vertex: usize) -> Option<f64> {
        let r = self.rows.iter().position(|x| *x == robot)?;
        let c = self.cols.iter().position(|x| *x == vertex)?;
        Some(self.entries[r][c])
    }
}

/// Vertex assigned to each group member.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormationPlan {
    pub task: TaskId,
    pub slot_of: BTreeMap<RobotId, usize>,
}

impl FormationPlan {
    pub fn total_distance(&self, matrix: &DistanceMatrix) -> f64 {
        self.slot_of
            .iter()
            .map(|(r, v)| matrix.get(*r, *v).unwrap_or(f64::INFINITY))
            .sum()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum FormationError {
    #[error("queue does not match the matrix rows")]
    QueueMismatch,
    #[error("{rows} robots but only {cols} free vertices")]
    TooFewVertices { rows: usize, cols: usize },
    #[error("matrix is not square")]
    NotSquare,
}

/// Walk the queue; each robot claims its nearest unclaimed vertex, ties going
/// to the lower vertex index.
///
/// When some vertices are already held the matrix may have more columns than
/// rows; every row still receives a distinct vertex.
pub fn formation_assign(
    task: TaskId,
    queue: &[RobotId],
    matrix: &DistanceMatrix,
) -> Result<FormationPlan, FormationError> {
    let queued: BTreeSet<RobotId> = queue.iter().copied().collect();
    let rows: BTreeSet<RobotId> = matrix.rows.iter().copied().collect();
    if queued != rows || queued.len() != queue.len() {
        return Err(FormationError::QueueMismatch);
    }
    if matrix.rows.len() > matrix.cols.len() {
        return Err(FormationError::TooFewVertices {
            rows: matrix.rows.len(),
            cols: matrix.cols.len(),
        });
    }
    let mut taken = vec![false; matrix.cols.len()];
    let mut slot_of = BTreeMap::new();
    for robot in queue {
        let r = matrix.rows.iter().position(|x| x == robot).expect("checked");
        let (c, _) = matrix.entries[r]
            .iter()
            .enumerate()
            .filter(|(c, _)| !taken[*c])
            .min_by(|a, b| {
                a.1.total_cmp(b.1)
                    .then(matrix.cols[a.0].cmp(&matrix.cols[b.0]))
            })
            .expect("a free column remains");
        taken[c] = true;
        slot_of.insert(*robot, matrix.cols[c]);
    }
    Ok(FormationPlan { task, slot_of })
}

/// Exact minimum-total-distance assignment (Hungarian method with potentials).
///
/// Returns the column index chosen for every row and the total distance.
pub fn hungarian_oracle(matrix: &DistanceMatrix) -> Result<(Vec<usize>, f64), FormationError> {
    let n = matrix.rows.len();
    if matrix.cols.len() != n || matrix.entries.iter().any(|r| r.len() != n) {
        return Err(FormationError::NotSquare);
    }
    if n == 0 {
        return Ok((Vec::new(), 0.0));
    }
    let a = &matrix.entries;
    // 1-based arrays; p[j] is the row matched to column j
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = a[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0; n];
    for j in 1..=n {
        col_of_row[p[j] - 1] = j - 1;
    }
    let total = col_of_row.iter().enumerate().map(|(r, &c)| a[r][c]).sum();
    Ok((col_of_row, total))
}
