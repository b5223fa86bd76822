//! CSV rows. Each subcommand has one fixed header whatever the task;
//! fields that do not apply to a task are left empty. Numbers are written
//! with the shortest round-tripping decimal form and a dot separator.

use serde::Serialize;

/// One training iteration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainRow {
    pub iteration: u64,
    pub task_loss: Option<f64>,
    pub model_loss: Option<f64>,
    pub resource_cost: Option<f64>,
    /// Spaceship: minibatch-mean manager return. Maze: mean normalized return.
    pub manager_return: f64,
    pub imaginations: f64,
    pub route_entropy: Option<f64>,
    pub manager_grad_norm: f64,
    pub controller_grad_norm: Option<f64>,
    pub lr_model: Option<f64>,
    pub lr_controller: Option<f64>,
    pub lr_manager: f64,
}

pub const TRAIN_HEADER: &str = "iteration,task_loss,model_loss,resource_cost,manager_return,imaginations,route_entropy,manager_grad_norm,controller_grad_norm,lr_model,lr_controller,lr_manager";

/// One evaluation episode.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub task: &'static str,
    pub episode: usize,
    pub maze: Option<usize>,
    pub goal_row: Option<usize>,
    pub goal_col: Option<usize>,
    pub task_loss: Option<f64>,
    pub fuel_cost: Option<f64>,
    pub final_distance: Option<f64>,
    pub normalized_return: Option<f64>,
    pub optimum: Option<f64>,
    pub resource_cost: f64,
    /// Spaceship: imagined steps. Maze: imagination units.
    pub imaginations: f64,
}

pub const EVAL_HEADER: &str = "task,episode,maze,goal_row,goal_col,task_loss,fuel_cost,final_distance,normalized_return,optimum,resource_cost,imaginations";

/// One (cell, seed) of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub cell: usize,
    pub task: &'static str,
    pub strategy: &'static str,
    pub seed: u64,
    pub tau: f64,
    pub max_imaginations: usize,
    pub max_actions: usize,
    pub episodes: usize,
    pub mean_task_loss: Option<f64>,
    pub mean_return: Option<f64>,
    pub mean_imaginations: f64,
    pub mean_resource_cost: f64,
}

pub const SWEEP_HEADER: &str = "cell,task,strategy,seed,tau,max_imaginations,max_actions,episodes,mean_task_loss,mean_return,mean_imaginations,mean_resource_cost";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TreeStatsRow {
    /// Canonical bracket form of the imagination tree.
    pub shape: String,
    pub count: usize,
    pub fraction: f64,
}

pub const TREE_STATS_HEADER: &str = "shape,count,fraction";

/// Serialize `rows` under `header`. The header is written explicitly so an
/// empty table still has one.
pub fn to_csv<T: Serialize>(header: &str, rows: &[T]) -> Result<Vec<u8>, csv::Error> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header.split(','))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| e.into_error().into())
}

/// Mean of the rows' summary fields.
pub fn summarize(rows: &[EvalRow]) -> (Option<f64>, Option<f64>, f64, f64) {
    let n = rows.len().max(1) as f64;
    let mean_of = |f: fn(&EvalRow) -> Option<f64>| {
        let v: Option<Vec<f64>> = rows.iter().map(f).collect();
        v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / n)
    };
    (
        mean_of(|r| r.task_loss),
        mean_of(|r| r.normalized_return),
        rows.iter().map(|r| r.imaginations).sum::<f64>() / n,
        rows.iter().map(|r| r.resource_cost).sum::<f64>() / n,
    )
}
