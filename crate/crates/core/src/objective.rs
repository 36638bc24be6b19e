//! Contrastive training objective.
//!
//! Each similarity table is scored with a projection matching loss: softmax
//! over in-batch queries for each image, negative log-likelihood of the
//! matched pair on the diagonal. Per-level object and image losses are summed
//! with the per-level weights into the total.

use crate::error::{HslError, Result};
use crate::graph::{Graph, Var};
use crate::similarity::{Granularity, SimilarityTable};

/// Scalar losses of one step, per (level, granularity), plus their weighted total.
#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub components: Vec<LossComponent>,
    pub total: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct LossComponent {
    pub level: usize,
    pub granularity: Granularity,
    pub value: f64,
}

impl LossBreakdown {
    pub fn component(&self, level: usize, granularity: Granularity) -> Option<f64> {
        self.components
            .iter()
            .find(|c| c.level == level && c.granularity == granularity)
            .map(|c| c.value)
    }
}

/// Matching loss over a square similarity table:
/// mean over rows of (logsumexp(row) - diagonal), the stabilized form of
/// -log(exp(s_ii) / sum_j exp(s_ij)).
pub fn matching_loss(g: &mut Graph, table: Var) -> Result<Var> {
    let shape = g.value(table).shape().to_vec();
    let (rows, cols) = (g.value(table).rows(), g.value(table).cols());
    if rows != cols || rows == 0 {
        return Err(HslError::ShapeMismatch {
            op: "matching_loss",
            detail: format!("expected square table, got {shape:?}"),
        });
    }
    let lse = g.logsumexp_rows(table)?;
    let diag = g.diag(table)?;
    let per_row = g.sub(lse, diag)?;
    g.mean_all(per_row)
}

/// Weighted sum of all per-(level, granularity) matching losses. The weights
/// vector must have one entry per level present in the tables; zero weights
/// are allowed here (they remove that level's gradient entirely).
pub fn total_loss(
    g: &mut Graph,
    tables: &[SimilarityTable],
    level_weights: &[f64],
) -> Result<(Var, LossBreakdown)> {
    if tables.is_empty() {
        return Err(HslError::ShapeMismatch {
            op: "total_loss",
            detail: "no similarity tables".into(),
        });
    }
    let max_level = tables.iter().map(|t| t.level).max().unwrap_or(0);
    if level_weights.len() != max_level {
        return Err(HslError::Config(format!(
            "{} level weights for {} levels",
            level_weights.len(),
            max_level
        )));
    }

    let mut components = Vec::with_capacity(tables.len());
    let mut total_var: Option<Var> = None;
    let mut total_value = 0.0;
    for level in 1..=max_level {
        let mut level_sum: Option<Var> = None;
        for table in tables.iter().filter(|t| t.level == level) {
            let loss = matching_loss(g, table.values)?;
            components.push(LossComponent {
                level,
                granularity: table.granularity,
                value: g.item(loss),
            });
            level_sum = Some(match level_sum {
                None => loss,
                Some(acc) => g.add(acc, loss)?,
            });
        }
        let Some(level_sum) = level_sum else { continue };
        let weighted = g.scale(level_sum, level_weights[level - 1])?;
        total_value += level_weights[level - 1] * g.item(level_sum);
        total_var = Some(match total_var {
            None => weighted,
            Some(acc) => g.add(acc, weighted)?,
        });
    }
    let total_var = total_var.expect("tables are non-empty");
    debug_assert!((g.item(total_var) - total_value).abs() <= 1e-12 * (1.0 + total_value.abs()));
    Ok((
        total_var,
        LossBreakdown {
            components,
            total: g.item(total_var),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn loss_of(entries: &[Vec<f64>]) -> f64 {
        let mut g = Graph::new();
        let t = g.input(Tensor::from_rows(entries).unwrap());
        let l = matching_loss(&mut g, t).unwrap();
        g.item(l)
    }

    #[test]
    fn singleton_batch_loss_is_exactly_zero() {
        assert_eq!(loss_of(&[vec![3.7]]), 0.0);
    }

    #[test]
    fn uniform_table_gives_ln_n() {
        for n in [2usize, 4, 7] {
            let rows = vec![vec![0.42; n]; n];
            assert!((loss_of(&rows) - (n as f64).ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn diagonal_dominant_worked_example() {
        // [[5,0],[0,5]] -> ln(1 + e^-5) per row.
        let expect = (1.0 + (-5.0f64).exp()).ln();
        assert!((loss_of(&[vec![5.0, 0.0], vec![0.0, 5.0]]) - expect).abs() < 1e-12);
        assert!((expect - 0.006715).abs() < 1e-6);
    }

    #[test]
    fn row_shift_invariance() {
        let base = vec![vec![1.0, -0.3, 0.8], vec![0.2, 2.0, -1.0], vec![0.0, 0.5, 1.5]];
        let mut shifted = base.clone();
        for (i, c) in [(0usize, 13.0), (1, -4.5), (2, 0.125)] {
            for v in &mut shifted[i] {
                *v += c;
            }
        }
        assert!((loss_of(&base) - loss_of(&shifted)).abs() < 1e-9);
    }

    #[test]
    fn loss_is_nonnegative() {
        for seed in 0..20 {
            let rows: Vec<Vec<f64>> = (0..3)
                .map(|i| {
                    (0..3)
                        .map(|j| ((seed * 9 + i * 3 + j) as f64 * 0.77).sin() * 4.0)
                        .collect()
                })
                .collect();
            assert!(loss_of(&rows) >= 0.0);
        }
    }

    #[test]
    fn weighted_total_of_uniform_tables() {
        // All four tables uniform with N=4, weights (0.5, 1):
        // total = (0.5 + 1) * 2 * ln 4.
        let mut g = Graph::new();
        let mut tables = Vec::new();
        for level in 1..=2 {
            for granularity in [Granularity::Object, Granularity::Image] {
                let t = g.input(Tensor::from_rows(&vec![vec![0.9; 4]; 4]).unwrap());
                tables.push(SimilarityTable {
                    level,
                    granularity,
                    values: t,
                });
            }
        }
        let (total, breakdown) = total_loss(&mut g, &tables, &[0.5, 1.0]).unwrap();
        let expect = 1.5 * 2.0 * 4.0f64.ln();
        assert!((g.item(total) - expect).abs() < 1e-9);
        assert!((breakdown.total - expect).abs() < 1e-9);
        for c in &breakdown.components {
            assert!((c.value - 4.0f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn breakdown_total_matches_weighted_component_sum() {
        let mut g = Graph::new();
        let mut tables = Vec::new();
        for level in 1..=2 {
            for (gi, granularity) in [Granularity::Object, Granularity::Image].iter().enumerate() {
                let rows: Vec<Vec<f64>> = (0..3)
                    .map(|i| {
                        (0..3)
                            .map(|j| ((level * 11 + gi * 5 + i * 3 + j) as f64 * 0.37).sin())
                            .collect()
                    })
                    .collect();
                let t = g.input(Tensor::from_rows(&rows).unwrap());
                tables.push(SimilarityTable {
                    level,
                    granularity: *granularity,
                    values: t,
                });
            }
        }
        let weights = [0.5, 1.0];
        let (_, breakdown) = total_loss(&mut g, &tables, &weights).unwrap();
        let recomputed: f64 = (1..=2)
            .map(|l| {
                weights[l - 1]
                    * (breakdown.component(l, Granularity::Object).unwrap()
                        + breakdown.component(l, Granularity::Image).unwrap())
            })
            .sum();
        assert!((breakdown.total - recomputed).abs() < 1e-12);
    }

    #[test]
    fn weight_length_mismatch_is_rejected() {
        let mut g = Graph::new();
        let t = g.input(Tensor::from_rows(&[vec![1.0]]).unwrap());
        let tables = vec![SimilarityTable {
            level: 2,
            granularity: Granularity::Object,
            values: t,
        }];
        assert!(total_loss(&mut g, &tables, &[1.0]).is_err());
    }

    #[test]
    fn softmax_style_gradient_rows_sum_to_zero() {
        // Gradient of the matching loss w.r.t. a uniform table: each row of
        // the gradient sums to zero (softmax minus one-hot structure).
        use crate::params::ParamStore;
        let mut store = ParamStore::new();
        let id = store.add("table", vec![3, 3], vec![0.5; 9]).unwrap();
        let mut g = Graph::new();
        let t = g.param(&store, id);
        let loss = matching_loss(&mut g, t).unwrap();
        let grads = g.backward(loss, &store).unwrap();
        let gt = grads.get(id).unwrap();
        for i in 0..3 {
            let row_sum: f64 = (0..3).map(|j| gt.get2(i, j)).sum();
            assert!(row_sum.abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weight_removes_a_level_from_the_gradient() {
        use crate::params::ParamStore;
        let mut store = ParamStore::new();
        let level1 = store.add("level1", vec![2, 2], vec![0.3, -0.2, 0.6, 0.1]).unwrap();
        let level2 = store.add("level2", vec![2, 2], vec![0.9, 0.4, -0.5, 0.2]).unwrap();
        let mut g = Graph::new();
        let t1 = g.param(&store, level1);
        let t2 = g.param(&store, level2);
        let tables = vec![
            SimilarityTable {
                level: 1,
                granularity: Granularity::Object,
                values: t1,
            },
            SimilarityTable {
                level: 2,
                granularity: Granularity::Object,
                values: t2,
            },
        ];
        let (total, _) = total_loss(&mut g, &tables, &[0.0, 1.0]).unwrap();
        let grads = g.backward(total, &store).unwrap();
        assert!(grads.get(level1).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(grads.get(level2).unwrap().data().iter().any(|&v| v != 0.0));
    }
}
