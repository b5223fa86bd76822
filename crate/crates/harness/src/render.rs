//! SVG pictures of episodes.
//!
//! Spaceship: planets are filled circles sized by mass, the target sits at
//! the origin, executed motion is red, imagined steps that start from the
//! real state are blue and those that start from an imagined state green.
//! Maze: imagined cells are shaded with saturation growing with imagination
//! depth and executed moves are solid red arrows.
//!
//! Every drawn element carries a class naming its role, so the output can
//! be checked without looking at colours.

use std::collections::BTreeMap;
use std::fmt::Write;

use ibp::maze::{Cell, Maze};
use ibp::maze_planner::MazeEpisode;
use ibp::planner::{EpisodeTrace, Route};

pub const RED: &str = "#d62728";
pub const BLUE: &str = "#1f77b4";
pub const GREEN: &str = "#2ca02c";

const WORLD: f64 = 1.6;
const PIXELS: usize = 480;

fn header(w: usize, h: usize, view_box: &str) -> String {
    format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n\
         <svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"{view_box}\">\n"
    )
}

/// Class and colour of an imagined step. A step from the last imagined
/// state counts as imagined even when none exists yet, so an n-step trace
/// is green throughout.
fn imagination_style(route: Route) -> (&'static str, &'static str) {
    match route {
        Route::ImagineFromReal => ("from-real", BLUE),
        _ => ("from-imagined", GREEN),
    }
}

pub fn spaceship_svg(trace: &EpisodeTrace) -> String {
    let mut s = header(PIXELS, PIXELS, &format!("{0} {0} {1} {1}", -WORLD, 2.0 * WORLD));
    s.push_str("<rect class=\"background\" x=\"-1.6\" y=\"-1.6\" width=\"3.2\" height=\"3.2\" fill=\"white\"/>\n");
    // World y points up.
    s.push_str("<g transform=\"scale(1,-1)\">\n");
    for p in &trace.scene.planets {
        let r = 0.15 * p.mass.sqrt();
        let _ = writeln!(
            s,
            "<circle class=\"planet\" cx=\"{:.5}\" cy=\"{:.5}\" r=\"{r:.5}\" fill=\"#7f7f7f\"/>",
            p.position[0], p.position[1]
        );
    }
    s.push_str("<circle class=\"target\" cx=\"0\" cy=\"0\" r=\"0.03\" fill=\"none\" stroke=\"black\" stroke-width=\"0.01\"/>\n");
    for r in trace.records.iter().filter(|r| !r.is_real()) {
        let (class, colour) = imagination_style(r.route);
        let _ = writeln!(
            s,
            "<line class=\"{class}\" x1=\"{:.5}\" y1=\"{:.5}\" x2=\"{:.5}\" y2=\"{:.5}\" stroke=\"{colour}\" stroke-width=\"0.01\"/>",
            r.source_state[0], r.source_state[1], r.result_state[0], r.result_state[1]
        );
    }
    let start = trace.scene.ship_position;
    let points = std::iter::once(start)
        .chain(trace.path.iter().copied())
        .map(|p| format!("{:.5},{:.5}", p[0], p[1]))
        .collect::<Vec<_>>()
        .join(" ");
    let _ = writeln!(
        s,
        "<polyline class=\"real\" points=\"{points}\" fill=\"none\" stroke=\"{RED}\" stroke-width=\"0.015\"/>"
    );
    let _ = writeln!(
        s,
        "<circle class=\"ship\" cx=\"{:.5}\" cy=\"{:.5}\" r=\"0.02\" fill=\"{RED}\"/>",
        start[0], start[1]
    );
    s.push_str("</g>\n</svg>\n");
    s
}

const CELL: usize = 40;

/// Deepest imagination step that reached each cell over the episode.
pub fn imagination_depths(episode: &MazeEpisode) -> BTreeMap<Cell, usize> {
    let mut depth = BTreeMap::new();
    for slot in &episode.slots {
        for node in slot.search.nodes().iter().skip(1) {
            for (i, t) in node.path.iter().enumerate() {
                let d = depth.entry(t.next.position).or_insert(0);
                *d = (*d).max(i + 1);
            }
        }
    }
    depth
}

pub fn maze_svg(maze: &Maze, episode: &MazeEpisode) -> String {
    let (w, h) = (maze.width() * CELL, maze.height() * CELL);
    let mut s = header(w, h, &format!("0 0 {w} {h}"));
    s.push_str(
        "<defs><marker id=\"arrow\" viewBox=\"0 0 10 10\" refX=\"8\" refY=\"5\" markerWidth=\"5\" markerHeight=\"5\" orient=\"auto\">\
         <path d=\"M0,0 L10,5 L0,10 z\" fill=\"#d62728\"/></marker></defs>\n",
    );
    let depths = imagination_depths(episode);
    let deepest = depths.values().copied().max().unwrap_or(1).max(1);
    for cell in maze.cells() {
        let (x, y) = (cell.col * CELL, cell.row * CELL);
        if maze.is_wall(cell) {
            let _ = writeln!(
                s,
                "<rect class=\"wall\" x=\"{x}\" y=\"{y}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"#333333\"/>"
            );
        } else if let Some(&d) = depths.get(&cell) {
            let sat = 15 + 85 * d / deepest;
            let _ = writeln!(
                s,
                "<rect class=\"imagined\" data-depth=\"{d}\" x=\"{x}\" y=\"{y}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"hsl(210,{sat}%,60%)\"/>"
            );
        } else {
            let _ = writeln!(
                s,
                "<rect class=\"open\" x=\"{x}\" y=\"{y}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"white\" stroke=\"#dddddd\"/>"
            );
        }
    }
    let centre = |c: Cell| (c.col * CELL + CELL / 2, c.row * CELL + CELL / 2);
    for &g in maze.candidate_goals() {
        let (x, y) = centre(g);
        let (class, fill) = if g == episode.goal {
            ("goal", "gold")
        } else {
            ("candidate", "none")
        };
        let _ = writeln!(
            s,
            "<circle class=\"{class}\" cx=\"{x}\" cy=\"{y}\" r=\"{}\" fill=\"{fill}\" stroke=\"black\"/>",
            CELL / 4
        );
    }
    let (sx, sy) = centre(maze.start());
    let _ = writeln!(
        s,
        "<rect class=\"start\" x=\"{}\" y=\"{}\" width=\"12\" height=\"12\" fill=\"black\"/>",
        sx - 6,
        sy - 6
    );
    let path = episode.real_path();
    for pair in path.windows(2).filter(|p| p[0] != p[1]) {
        let ((x1, y1), (x2, y2)) = (centre(pair[0]), centre(pair[1]));
        let _ = writeln!(
            s,
            "<line class=\"real\" x1=\"{x1}\" y1=\"{y1}\" x2=\"{x2}\" y2=\"{y2}\" stroke=\"{RED}\" stroke-width=\"3\" marker-end=\"url(#arrow)\"/>"
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use ibp::maze::fixtures;
    use ibp::maze_planner::{run_maze_episode, MazeAgentConfig, MazeManager, MazeTask, QLearningConfig};
    use ibp::planner::{
        run_episode, AgentConfig, AgentParams, EpisodeLimits, EpisodeRngs, EpisodeSpec, ResourceSchedule, Strategy,
    };
    use ibp::rng::{SeedTree, Stream};
    use ibp::spaceship::{sample_scene, TaskConfig};

    fn trace(strategy: Strategy, imaginations: usize) -> EpisodeTrace {
        let seeds = SeedTree::new(3);
        let spec = EpisodeSpec {
            task: TaskConfig::default(),
            limits: EpisodeLimits::new(2, imaginations),
            strategy,
            schedule: ResourceSchedule::Fixed { tau: 0.0 },
        };
        let params = AgentParams::seeded(AgentConfig::default(), &seeds);
        let scene = sample_scene(&mut seeds.rng(Stream::Env, 0), &spec.task);
        // Several episodes so that imagination actually happens.
        (0..20)
            .map(|i| run_episode(&params, &scene, &spec, &mut EpisodeRngs::for_episode(&seeds, i)).unwrap())
            .max_by_key(|t| t.imagination_steps())
            .unwrap()
    }

    fn count(svg: &str, class: &str) -> usize {
        svg.matches(&format!("class=\"{class}\"")).count()
    }

    #[test]
    fn no_imagination_draws_only_red() {
        let svg = spaceship_svg(&trace(Strategy::Tree, 0));
        assert_eq!(count(&svg, "real"), 1);
        assert_eq!(count(&svg, "from-real") + count(&svg, "from-imagined"), 0);
        assert!(!svg.contains(BLUE) && !svg.contains(GREEN));
    }

    #[test]
    fn nstep_is_all_green() {
        let t = trace(Strategy::NStep, 3);
        assert!(t.imagination_steps() > 0);
        let svg = spaceship_svg(&t);
        assert_eq!(count(&svg, "from-imagined"), t.imagination_steps());
        assert_eq!(count(&svg, "from-real"), 0);
    }

    #[test]
    fn onestep_is_all_blue() {
        let t = trace(Strategy::OneStep, 3);
        assert!(t.imagination_steps() > 0);
        let svg = spaceship_svg(&t);
        assert_eq!(count(&svg, "from-real"), t.imagination_steps());
        assert_eq!(count(&svg, "from-imagined"), 0);
    }

    #[test]
    fn maze_shading_follows_depth() {
        let seeds = SeedTree::new(0);
        let maze = fixtures::single();
        let task =
            MazeTask::all_goals(maze, &QLearningConfig::default(), &mut seeds.rng(Stream::QLearning, 0)).unwrap();
        let cfg = MazeAgentConfig {
            imagination_budget: 8,
            ..Default::default()
        };
        let goal = task.eval_goals[0];
        let ep = run_maze_episode(&task, goal, &cfg, MazeManager::NStep, seeds.rng(Stream::Manager, 0)).unwrap();
        let svg = maze_svg(&task.maze, &ep);
        let depths = imagination_depths(&ep);
        assert!(!depths.is_empty());
        assert_eq!(
            count(&svg, "imagined"),
            depths.keys().filter(|c| !task.maze.is_wall(**c)).count()
        );
        assert_eq!(count(&svg, "goal"), 1);
        let moves = ep.real_path().windows(2).filter(|p| p[0] != p[1]).count();
        assert_eq!(count(&svg, "real"), moves);
        // Deeper cells are more saturated.
        let deepest = depths.values().max().unwrap();
        assert!(svg.contains(&format!("data-depth=\"{deepest}\" ")));
        assert!(svg.contains("hsl(210,100%,60%)"));
    }
}
