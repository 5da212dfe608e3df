//! Interval-refinement search for the soft-constraint margin ε.
//!
//! Each repeat evaluates `N` equally spaced margins. The best and second-best
//! margins (ordered so that `ε1 <= ε2`) decide the next interval:
//!
//! * both at the grid ends, or the repeat budget exhausted: stop;
//! * `ε1` at the left end: `[ε1, ε2 + δ]`;
//! * `ε2` at the right end: `[ε1 - δ, ε2]`;
//! * otherwise: `[ε1 - δ, ε2 + δ]`.
//!
//! The new interval is clipped to `[0, 1]` and split into the same `N`
//! points.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SearchError {
    #[error("grid needs at least 3 points, got {0}")]
    GridTooSmall(usize),
    #[error("grid point {index} (ε = {epsilon}) has no recorded result")]
    MissingResults { index: usize, epsilon: f64 },
    #[error("grid index {0} is out of range")]
    IndexOutOfRange(usize),
    #[error("failed to write search history: {0}")]
    Output(String),
}

/// Outcome of training at one ε: mean and spread of `A_T` over the seed
/// population, and mean forgetting when available.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub mean: f64,
    pub std: f64,
    pub forgetting: Option<f64>,
}

impl From<f64> for Score {
    fn from(mean: f64) -> Self {
        Self {
            mean,
            std: 0.0,
            forgetting: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpsilonSearchState {
    repeat: usize,
    max_repeats: usize,
    grid: Vec<f64>,
    delta: f64,
    results: Vec<Option<Score>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Refinement {
    Continue(EpsilonSearchState),
    Stopped,
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let step = (hi - lo) / (n - 1) as f64;
    (0..n)
        .map(|i| if i == n - 1 { hi } else { lo + step * i as f64 })
        .collect()
}

/// Splits `[0, 1]` into `n` points for the first repeat.
pub fn init_grid(n: usize, max_repeats: usize) -> Result<EpsilonSearchState, SearchError> {
    if n < 3 {
        return Err(SearchError::GridTooSmall(n));
    }
    Ok(EpsilonSearchState::over(0.0, 1.0, n, 0, max_repeats))
}

impl EpsilonSearchState {
    fn over(lo: f64, hi: f64, n: usize, repeat: usize, max_repeats: usize) -> Self {
        Self {
            repeat,
            max_repeats,
            grid: linspace(lo, hi, n),
            delta: (hi - lo) / (n - 1) as f64,
            results: vec![None; n],
        }
    }

    /// Zero-based index of the repeat this grid belongs to.
    pub fn repeat(&self) -> usize {
        self.repeat
    }

    pub fn max_repeats(&self) -> usize {
        self.max_repeats
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn results(&self) -> &[Option<Score>] {
        &self.results
    }

    pub fn record(&mut self, index: usize, score: Score) -> Result<(), SearchError> {
        let slot = self
            .results
            .get_mut(index)
            .ok_or(SearchError::IndexOutOfRange(index))?;
        *slot = Some(score);
        Ok(())
    }

    fn scores(&self) -> Result<Vec<Score>, SearchError> {
        self.results
            .iter()
            .enumerate()
            .map(|(index, s)| {
                s.ok_or(SearchError::MissingResults {
                    index,
                    epsilon: self.grid[index],
                })
            })
            .collect()
    }

    /// Grid indices of the best and second-best scores; ties go to the
    /// smaller ε.
    fn top_two(&self) -> Result<(usize, usize), SearchError> {
        let scores = self.scores()?;
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].mean.total_cmp(&scores[a].mean).then(a.cmp(&b)));
        Ok((order[0], order[1]))
    }

    /// Next grid per the refinement cases, or [`Refinement::Stopped`].
    pub fn refine(&self) -> Result<Refinement, SearchError> {
        let (best, second) = self.top_two()?;
        let (lo_idx, hi_idx) = if best <= second {
            (best, second)
        } else {
            (second, best)
        };
        let n = self.grid.len();
        let completed = self.repeat + 1;
        let at_left = lo_idx == 0;
        let at_right = hi_idx == n - 1;
        if (at_left && at_right) || completed > self.max_repeats {
            return Ok(Refinement::Stopped);
        }
        let (e1, e2) = (self.grid[lo_idx], self.grid[hi_idx]);
        let (lo, hi) = if at_left {
            (e1, e2 + self.delta)
        } else if at_right {
            (e1 - self.delta, e2)
        } else {
            (e1 - self.delta, e2 + self.delta)
        };
        Ok(Refinement::Continue(Self::over(
            lo.clamp(0.0, 1.0),
            hi.clamp(0.0, 1.0),
            n,
            completed,
            self.max_repeats,
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub repeat: usize,
    pub epsilon: f64,
    pub score: Score,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub best_epsilon: f64,
    pub best_score: Score,
    /// Number of repeats (grids) evaluated.
    pub repeats: usize,
    pub history: Vec<HistoryEntry>,
}

fn search_with<E, F>(n: usize, max_repeats: usize, mut evaluate_grid: F) -> Result<SearchOutcome, E>
where
    E: From<SearchError>,
    F: FnMut(&[f64]) -> Result<Vec<Score>, E>,
{
    let mut state = init_grid(n, max_repeats)?;
    let mut history = Vec::new();
    loop {
        let scores = evaluate_grid(state.grid())?;
        for (i, score) in scores.into_iter().enumerate() {
            history.push(HistoryEntry {
                repeat: state.repeat(),
                epsilon: state.grid()[i],
                score,
            });
            state.record(i, score)?;
        }
        match state.refine()? {
            Refinement::Continue(next) => state = next,
            Refinement::Stopped => break,
        }
    }
    let best = history
        .iter()
        .min_by(|a, b| {
            b.score
                .mean
                .total_cmp(&a.score.mean)
                .then(a.epsilon.total_cmp(&b.epsilon))
        })
        .expect("at least one grid evaluated");
    Ok(SearchOutcome {
        best_epsilon: best.epsilon,
        best_score: best.score,
        repeats: state.repeat() + 1,
        history,
    })
}

/// Runs the refinement loop, evaluating grid points one after another.
/// The returned ε is the best over every evaluated point.
pub fn run_search<E, F, S>(n: usize, max_repeats: usize, mut trainer: F) -> Result<SearchOutcome, E>
where
    E: From<SearchError>,
    F: FnMut(f64) -> Result<S, E>,
    S: Into<Score>,
{
    search_with(n, max_repeats, |grid| {
        grid.iter().map(|&eps| trainer(eps).map(Into::into)).collect()
    })
}

/// As [`run_search`], with the points of each grid trained concurrently.
pub fn run_search_par<E, F, S>(n: usize, max_repeats: usize, trainer: F) -> Result<SearchOutcome, E>
where
    E: From<SearchError> + Send,
    F: Fn(f64) -> Result<S, E> + Sync,
    S: Into<Score>,
{
    search_with(n, max_repeats, |grid| {
        grid.par_iter()
            .map(|&eps| trainer(eps).map(Into::into))
            .collect()
    })
}

pub const HISTORY_COLUMNS: [&str; 5] = ["repeat", "epsilon", "A_T_mean", "A_T_std", "F_T_mean"];

/// Writes the search history as CSV.
pub fn write_history_csv<W: Write>(w: W, history: &[HistoryEntry]) -> Result<(), SearchError> {
    let out = |e: csv::Error| SearchError::Output(e.to_string());
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(HISTORY_COLUMNS).map_err(out)?;
    for h in history {
        csv.write_record([
            h.repeat.to_string(),
            h.epsilon.to_string(),
            h.score.mean.to_string(),
            h.score.std.to_string(),
            h.score.forgetting.map(|f| f.to_string()).unwrap_or_default(),
        ])
        .map_err(out)?;
    }
    csv.flush().map_err(|e| SearchError::Output(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state_with(grid_lo: f64, grid_hi: f64, n: usize, repeat: usize, scores: &[f64]) -> EpsilonSearchState {
        let mut s = EpsilonSearchState::over(grid_lo, grid_hi, n, repeat, 5);
        for (i, &v) in scores.iter().enumerate() {
            s.record(i, v.into()).unwrap();
        }
        s
    }

    fn range(r: Refinement) -> (f64, f64) {
        match r {
            Refinement::Continue(s) => (s.grid()[0], *s.grid().last().unwrap()),
            Refinement::Stopped => panic!("unexpected stop"),
        }
    }

    #[test]
    fn initial_grids() {
        let s = init_grid(11, 5).unwrap();
        assert!((s.delta() - 0.1).abs() < 1e-15);
        for (i, e) in s.grid().iter().enumerate() {
            assert!((e - i as f64 / 10.0).abs() < 1e-15);
        }
        assert_eq!(s.repeat(), 0);
        let s = init_grid(7, 5).unwrap();
        assert!((s.delta() - 0.16667).abs() < 1e-5);
        assert_eq!(init_grid(3, 1).unwrap().grid(), &[0.0, 0.5, 1.0]);
        assert_eq!(init_grid(2, 1), Err(SearchError::GridTooSmall(2)));
    }

    #[test]
    fn stop_when_best_two_are_the_ends() {
        let s = state_with(0.0, 1.0, 11, 1, &[0.9, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.8]);
        assert_eq!(s.refine().unwrap(), Refinement::Stopped);
    }

    #[test]
    fn stop_when_repeats_are_exhausted() {
        let mut s = state_with(0.0, 1.0, 3, 0, &[0.1, 0.9, 0.5]);
        s.max_repeats = 0;
        assert_eq!(s.refine().unwrap(), Refinement::Stopped);
    }

    #[test]
    fn interior_case_widens_both_sides() {
        let mut scores = vec![0.0; 11];
        scores[1] = 0.9;
        scores[2] = 0.8;
        let (lo, hi) = range(state_with(0.0, 1.0, 11, 0, &scores).refine().unwrap());
        assert!((lo - 0.0).abs() < 1e-12 && (hi - 0.3).abs() < 1e-12);
    }

    #[test]
    fn left_end_case() {
        let mut scores = vec![0.0; 11];
        scores[0] = 0.9;
        scores[1] = 0.8;
        let (lo, hi) = range(state_with(0.0, 1.0, 11, 0, &scores).refine().unwrap());
        assert_eq!(lo, 0.0);
        assert!((hi - 0.2).abs() < 1e-12);
    }

    #[test]
    fn right_end_case() {
        let mut scores = vec![0.0; 11];
        scores[10] = 0.9;
        scores[8] = 0.8;
        let (lo, hi) = range(state_with(0.0, 1.0, 11, 0, &scores).refine().unwrap());
        assert!((lo - 0.7).abs() < 1e-12);
        assert_eq!(hi, 1.0);
    }

    #[test]
    fn refined_ranges_stay_in_unit_interval_and_keep_top_two() {
        // deterministic pseudo-random score vectors
        let mut x: u64 = 0x9e37_79b9;
        for _ in 0..500 {
            let scores: Vec<f64> = (0..7)
                .map(|_| {
                    x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    (x >> 11) as f64 / (1u64 << 53) as f64
                })
                .collect();
            let s = state_with(0.0, 1.0, 7, 0, &scores);
            let (b, c) = s.top_two().unwrap();
            if let Refinement::Continue(next) = s.refine().unwrap() {
                let (lo, hi) = (next.grid()[0], *next.grid().last().unwrap());
                assert!(0.0 <= lo && lo < hi && hi <= 1.0);
                for e in [s.grid()[b], s.grid()[c]] {
                    assert!(lo - 1e-12 <= e && e <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn missing_results_are_reported() {
        let mut s = init_grid(3, 2).unwrap();
        s.record(0, 0.5.into()).unwrap();
        assert!(matches!(s.refine(), Err(SearchError::MissingResults { index: 1, .. })));
        assert_eq!(s.record(3, 0.1.into()), Err(SearchError::IndexOutOfRange(3)));
    }

    #[test]
    fn parabola_search_finds_peak() {
        let out = run_search::<SearchError, _, _>(11, 3, |e| Ok(-(e - 0.3) * (e - 0.3))).unwrap();
        assert!((out.best_epsilon - 0.3).abs() < 0.025);
        assert!(out.repeats <= 4);
    }

    #[test]
    fn flat_objective_stops_on_repeat_budget() {
        let out = run_search::<SearchError, _, _>(11, 3, |_| Ok(0.5)).unwrap();
        assert_eq!(out.repeats, 4);
        assert_eq!(out.history.len(), 44);
        assert_eq!(out.best_epsilon, 0.0);
    }

    #[test]
    fn trainer_errors_propagate() {
        #[derive(Debug, PartialEq)]
        enum E {
            Search,
            Trainer,
        }
        impl From<SearchError> for E {
            fn from(_: SearchError) -> Self {
                E::Search
            }
        }
        let r = run_search::<E, _, f64>(5, 2, |e| if e > 0.5 { Err(E::Trainer) } else { Ok(e) });
        assert_eq!(r.unwrap_err(), E::Trainer);
        let r = run_search::<E, _, f64>(1, 2, Ok);
        assert_eq!(r.unwrap_err(), E::Search);
    }

    #[test]
    fn parallel_search_matches_serial() {
        let f = |e: f64| -> Result<f64, SearchError> { Ok(-(e - 0.61).powi(2)) };
        let a = run_search(11, 4, f).unwrap();
        let b = run_search_par(11, 4, f).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn history_csv_layout() {
        let out = run_search::<SearchError, _, _>(3, 0, Ok).unwrap();
        let mut buf = Vec::new();
        write_history_csv(&mut buf, &out.history).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "repeat,epsilon,A_T_mean,A_T_std,F_T_mean");
        assert_eq!(lines.next().unwrap(), "0,0,0,0,");
        assert_eq!(text.lines().count(), 4);
    }
}
