//! Closed-form learning dynamics for the two-player iterated prisoner's
//! dilemma: exact policy and orientation-parameter updates, trajectory
//! rollouts, and vector-field emission for plotting.
//!
//! Orientation parameters are laid out as
//! `w1 = [wC11, wC12, wD11, wD12]` and `w2 = [wC21, wC22, wD21, wD22]`,
//! where `wXij` is the ratio agent `i` gives agent `j` when the *other*
//! agent in `i`'s view plays X.

use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalyzerError {
    #[error("discount factor must lie in (0, 1), got {0}")]
    BadDiscount(f64),
    #[error("grid needs at least 2 points per axis, got {0}")]
    BadGrid(usize),
    #[error("w component index {0} out of range (0..4)")]
    BadComponent(usize),
}

/// Cooperation probabilities and orientation parameters of both agents,
/// together with the learning rates.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyzerState {
    pub theta1: f64,
    pub theta2: f64,
    pub w1: [f64; 4],
    pub w2: [f64; 4],
    pub zeta: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl AnalyzerState {
    /// The initial condition studied in the dynamics analysis:
    /// `theta = (0.5, 0.5)`, `w1 = [1, 0, 1, 0]`, `w2 = [0, 1, 0, 1]`.
    pub fn canonical() -> Self {
        AnalyzerState {
            theta1: 0.5,
            theta2: 0.5,
            w1: [1.0, 0.0, 1.0, 0.0],
            w2: [0.0, 1.0, 0.0, 1.0],
            zeta: 0.01,
            beta: 1.0,
            gamma: 0.99,
        }
    }

    pub fn validate(&self) -> Result<(), AnalyzerError> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(AnalyzerError::BadDiscount(self.gamma));
        }
        Ok(())
    }
}

/// Exact one-step policy updates `(delta1, delta2)`:
///
/// `delta1 = zeta/(1-gamma) * [(3 wD11 - wC11 - wC21) theta2 - 2 (wD11 + wD21)]`
/// `delta2 = zeta/(1-gamma) * [(3 wD22 - wC12 - wC22) theta1 - 2 (wD12 + wD22)]`
pub fn policy_deltas(state: &AnalyzerState) -> Result<(f64, f64), AnalyzerError> {
    state.validate()?;
    let c = state.zeta / (1.0 - state.gamma);
    let [wc11, wc12, wd11, wd12] = state.w1;
    let [wc21, wc22, wd21, wd22] = state.w2;
    let d1 = c * ((3.0 * wd11 - wc11 - wc21) * state.theta2 - 2.0 * (wd11 + wd21));
    let d2 = c * ((3.0 * wd22 - wc12 - wc22) * state.theta1 - 2.0 * (wd12 + wd22));
    Ok((d1, d2))
}

/// Exact orientation-parameter updates `(dw1, dw2)`:
///
/// `dw1 = zeta*beta/(1-gamma)^2 * [theta2, -2 theta1, -(3 theta2 - 2), -4]`
/// `dw2 = zeta*beta/(1-gamma)^2 * [-2 theta2, theta1, -4, -(3 theta1 - 2)]`
///
/// Neither depends on the current `w`.
pub fn orientation_deltas(state: &AnalyzerState) -> Result<([f64; 4], [f64; 4]), AnalyzerError> {
    state.validate()?;
    let c = state.zeta * state.beta / (1.0 - state.gamma).powi(2);
    let (t1, t2) = (state.theta1, state.theta2);
    let dw1 = [c * t2, c * -2.0 * t1, c * -(3.0 * t2 - 2.0), c * -4.0];
    let dw2 = [c * -2.0 * t2, c * t1, c * -4.0, c * -(3.0 * t1 - 2.0)];
    Ok((dw1, dw2))
}

/// Alternates blocks of `policy_steps_per_round` clamped policy updates with
/// one orientation update, returning the state after every round (the first
/// entry is the initial state).
pub fn run_dynamics(
    initial: &AnalyzerState,
    rounds: usize,
    policy_steps_per_round: usize,
) -> Result<Vec<AnalyzerState>, AnalyzerError> {
    initial.validate()?;
    let mut states = Vec::with_capacity(rounds + 1);
    states.push(initial.clone());
    let mut current = initial.clone();
    for _ in 0..rounds {
        for _ in 0..policy_steps_per_round {
            let (d1, d2) = policy_deltas(&current)?;
            current.theta1 = (current.theta1 + d1).clamp(0.0, 1.0);
            current.theta2 = (current.theta2 + d2).clamp(0.0, 1.0);
        }
        let (dw1, dw2) = orientation_deltas(&current)?;
        for k in 0..4 {
            current.w1[k] += dw1[k];
            current.w2[k] += dw2[k];
        }
        states.push(current.clone());
    }
    Ok(states)
}

/// Rectangular grid of displacement vectors.
#[derive(Debug, Clone)]
pub struct VectorFieldGrid {
    pub x_name: String,
    pub y_name: String,
    /// Rows of `(x, y, dx, dy)`.
    pub points: Vec<(f64, f64, f64, f64)>,
}

#[derive(Debug, Clone, Copy)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub resolution: usize,
}

impl GridSpec {
    pub fn unit(resolution: usize) -> Self {
        GridSpec { x_min: 0.0, x_max: 1.0, y_min: 0.0, y_max: 1.0, resolution }
    }

    fn axis(&self, min: f64, max: f64, i: usize) -> f64 {
        min + (max - min) * i as f64 / (self.resolution - 1) as f64
    }
}

/// Policy vector field over `(theta1, theta2)` for fixed orientation
/// parameters.
pub fn emit_vector_field(
    w1: [f64; 4],
    w2: [f64; 4],
    grid: GridSpec,
    zeta: f64,
    beta: f64,
    gamma: f64,
) -> Result<VectorFieldGrid, AnalyzerError> {
    if grid.resolution < 2 {
        return Err(AnalyzerError::BadGrid(grid.resolution));
    }
    let mut points = Vec::with_capacity(grid.resolution * grid.resolution);
    for yi in 0..grid.resolution {
        for xi in 0..grid.resolution {
            let theta1 = grid.axis(grid.x_min, grid.x_max, xi);
            let theta2 = grid.axis(grid.y_min, grid.y_max, yi);
            let state = AnalyzerState { theta1, theta2, w1, w2, zeta, beta, gamma };
            let (d1, d2) = policy_deltas(&state)?;
            points.push((theta1, theta2, d1, d2));
        }
    }
    Ok(VectorFieldGrid { x_name: "theta1".into(), y_name: "theta2".into(), points })
}

/// Which orientation parameter serves as a plot axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WAxis {
    /// 0 for agent 1's parameters, otherwise agent 2's.
    pub agent: usize,
    /// Component index into `[wC_1, wC_2, wD_1, wD_2]`.
    pub component: usize,
}

const W1_NAMES: [&str; 4] = ["wC11", "wC12", "wD11", "wD12"];
const W2_NAMES: [&str; 4] = ["wC21", "wC22", "wD21", "wD22"];

/// Orientation vector field over a chosen pair of `w` components at fixed
/// policies. The update formulas do not read `w`, so the displacement is
/// constant across the grid.
pub fn emit_orientation_field(
    state: &AnalyzerState,
    x_axis: WAxis,
    y_axis: WAxis,
    grid: GridSpec,
) -> Result<VectorFieldGrid, AnalyzerError> {
    if grid.resolution < 2 {
        return Err(AnalyzerError::BadGrid(grid.resolution));
    }
    for axis in [x_axis, y_axis] {
        if axis.component >= 4 {
            return Err(AnalyzerError::BadComponent(axis.component));
        }
    }
    let (dw1, dw2) = orientation_deltas(state)?;
    let pick = |axis: WAxis| -> (f64, &'static str) {
        if axis.agent == 0 {
            (dw1[axis.component], W1_NAMES[axis.component])
        } else {
            (dw2[axis.component], W2_NAMES[axis.component])
        }
    };
    let (dx, x_name) = pick(x_axis);
    let (dy, y_name) = pick(y_axis);
    let mut points = Vec::with_capacity(grid.resolution * grid.resolution);
    for yi in 0..grid.resolution {
        for xi in 0..grid.resolution {
            let x = grid.axis(grid.x_min, grid.x_max, xi);
            let y = grid.axis(grid.y_min, grid.y_max, yi);
            points.push((x, y, dx, dy));
        }
    }
    Ok(VectorFieldGrid { x_name: x_name.into(), y_name: y_name.into(), points })
}

/// CSV with header `x_name,y_name,x,y,dx,dy`.
pub fn field_to_csv(field: &VectorFieldGrid) -> String {
    let mut out = String::from("x_name,y_name,x,y,dx,dy\n");
    for &(x, y, dx, dy) in &field.points {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            field.x_name,
            field.y_name,
            crate::metrics::format_float(x),
            crate::metrics::format_float(y),
            crate::metrics::format_float(dx),
            crate::metrics::format_float(dy),
        );
    }
    out
}

/// CSV rows of `(round, theta1, theta2, w1[0..4], w2[0..4])`.
pub fn trajectory_to_csv(states: &[AnalyzerState]) -> String {
    let mut out = String::from(
        "round,theta1,theta2,w1_0,w1_1,w1_2,w1_3,w2_0,w2_1,w2_2,w2_3\n",
    );
    for (round, s) in states.iter().enumerate() {
        let mut row = format!(
            "{},{},{}",
            round,
            crate::metrics::format_float(s.theta1),
            crate::metrics::format_float(s.theta2)
        );
        for v in s.w1.iter().chain(s.w2.iter()) {
            row.push(',');
            row.push_str(&crate::metrics::format_float(*v));
        }
        out.push_str(&row);
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_deltas_match_substitution() {
        let state = AnalyzerState::canonical();
        let (d1, d2) = policy_deltas(&state).unwrap();
        let c = state.zeta / (1.0 - state.gamma);
        // (3*1 - 1 - 0) * 0.5 - 2*(1 + 0) = -1, for both agents by symmetry.
        assert!((d1 + c).abs() < 1e-12);
        assert!((d2 + c).abs() < 1e-12);
    }

    #[test]
    fn policy_deltas_late_training_instance() {
        let mut state = AnalyzerState::canonical();
        state.w1 = [4.0, -4.0, 0.5, -10.0];
        state.w2 = [-4.0, 4.0, -10.0, 0.5];
        let c = state.zeta / (1.0 - state.gamma);
        for theta2 in [0.0, 0.3, 1.0] {
            state.theta2 = theta2;
            let (d1, _) = policy_deltas(&state).unwrap();
            // (3*0.5 - 4 + 4) * theta2 - 2*(0.5 - 10) = 1.5 theta2 + 19.
            let expect = c * (1.5 * theta2 + 19.0);
            assert!((d1 - expect).abs() < 1e-12);
            assert!(d1 > 0.0);
        }
    }

    #[test]
    fn zero_sharing_means_zero_gradient() {
        let mut state = AnalyzerState::canonical();
        state.w1 = [0.0; 4];
        state.w2 = [0.0; 4];
        let (d1, d2) = policy_deltas(&state).unwrap();
        assert_eq!((d1, d2), (0.0, 0.0));
    }

    #[test]
    fn orientation_deltas_match_substitution() {
        let mut state = AnalyzerState::canonical();
        let c = state.zeta * state.beta / (1.0 - state.gamma).powi(2);
        let (dw1, _) = orientation_deltas(&state).unwrap();
        for (got, expect) in dw1.iter().zip([0.5, -1.0, 0.5, -4.0]) {
            assert!((got - c * expect).abs() < 1e-12);
        }

        state.theta1 = 1.0;
        state.theta2 = 1.0;
        let (dw1, dw2) = orientation_deltas(&state).unwrap();
        for (got, expect) in dw1.iter().zip([1.0, -2.0, -1.0, -4.0]) {
            assert!((got - c * expect).abs() < 1e-12);
        }
        for (got, expect) in dw2.iter().zip([-2.0, 1.0, -4.0, -1.0]) {
            assert!((got - c * expect).abs() < 1e-12);
        }
    }

    #[test]
    fn deltas_scale_linearly_in_rates() {
        let mut state = AnalyzerState::canonical();
        let (base1, _) = orientation_deltas(&state).unwrap();
        state.zeta *= 3.0;
        state.beta *= 2.0;
        let (scaled1, _) = orientation_deltas(&state).unwrap();
        for (b, s) in base1.iter().zip(&scaled1) {
            assert!((s - 6.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn gamma_one_is_rejected() {
        let mut state = AnalyzerState::canonical();
        state.gamma = 1.0;
        assert!(policy_deltas(&state).is_err());
        assert!(orientation_deltas(&state).is_err());
        assert!(run_dynamics(&state, 1, 1).is_err());
    }

    #[test]
    fn zero_rounds_returns_only_the_initial_state() {
        let state = AnalyzerState::canonical();
        let traj = run_dynamics(&state, 0, 10).unwrap();
        assert_eq!(traj.len(), 1);
        assert_eq!(traj[0], state);
    }

    #[test]
    fn w_update_signs_follow_the_formulas_every_round() {
        let state = AnalyzerState::canonical();
        let traj = run_dynamics(&state, 40, 10).unwrap();
        for w in traj.windows(2) {
            let (before, after) = (&w[0], &w[1]);
            // Reconstruct theta at the moment of the w update by replaying
            // the policy block.
            let mut mid = before.clone();
            for _ in 0..10 {
                let (d1, d2) = policy_deltas(&mid).unwrap();
                mid.theta1 = (mid.theta1 + d1).clamp(0.0, 1.0);
                mid.theta2 = (mid.theta2 + d2).clamp(0.0, 1.0);
            }
            let (dw1, dw2) = orientation_deltas(&mid).unwrap();
            let sign = |x: f64| {
                if x.abs() < 1e-12 {
                    0
                } else if x > 0.0 {
                    1
                } else {
                    -1
                }
            };
            for k in 0..4 {
                let actual1 = after.w1[k] - before.w1[k];
                let actual2 = after.w2[k] - before.w2[k];
                assert!((actual1 - dw1[k]).abs() < 1e-9);
                assert!((actual2 - dw2[k]).abs() < 1e-9);
                assert_eq!(sign(actual1), sign(dw1[k]));
                assert_eq!(sign(actual2), sign(dw2[k]));
            }
        }
    }

    #[test]
    fn canonical_run_converges_to_mutual_cooperation() {
        let traj = run_dynamics(&AnalyzerState::canonical(), 200, 10).unwrap();
        let reached = traj
            .iter()
            .position(|s| s.theta1 >= 0.95 && s.theta2 >= 0.95)
            .expect("never reached cooperation");
        for s in &traj[reached..] {
            assert!(s.theta1 >= 0.9 && s.theta2 >= 0.9);
        }
    }

    #[test]
    fn policy_field_structure() {
        // delta1 depends only on theta2, delta2 only on theta1.
        let field = emit_vector_field(
            [1.0, 0.0, 1.0, 0.0],
            [0.0, 1.0, 0.0, 1.0],
            GridSpec::unit(5),
            0.01,
            1.0,
            0.99,
        )
        .unwrap();
        assert_eq!(field.points.len(), 25);
        for row in field.points.chunks(5) {
            // Fixed theta2 within a row: delta1 constant.
            for p in row {
                assert!((p.2 - row[0].2).abs() < 1e-12);
            }
        }
        // Symmetric initial w: swapping axes swaps the displacement pair.
        for &(x, y, dx, dy) in &field.points {
            let mirrored = field
                .points
                .iter()
                .find(|p| (p.0 - y).abs() < 1e-12 && (p.1 - x).abs() < 1e-12)
                .unwrap();
            assert!((mirrored.2 - dy).abs() < 1e-12);
            assert!((mirrored.3 - dx).abs() < 1e-12);
        }

        let zero =
            emit_vector_field([0.0; 4], [0.0; 4], GridSpec::unit(3), 0.01, 1.0, 0.99).unwrap();
        assert!(zero.points.iter().all(|p| p.2 == 0.0 && p.3 == 0.0));
    }

    #[test]
    fn orientation_field_is_uniform_and_w_independent() {
        let mut state = AnalyzerState::canonical();
        let grid = GridSpec { x_min: -2.0, x_max: 2.0, y_min: -2.0, y_max: 2.0, resolution: 4 };
        let x = WAxis { agent: 0, component: 0 };
        let y = WAxis { agent: 0, component: 1 };
        let f1 = emit_orientation_field(&state, x, y, grid).unwrap();
        let c = state.zeta * state.beta / (1.0 - state.gamma).powi(2);
        for &(_, _, dx, dy) in &f1.points {
            assert!((dx - 0.5 * c).abs() < 1e-12);
            assert!((dy + 1.0 * c).abs() < 1e-12);
        }
        assert_eq!(f1.x_name, "wC11");
        assert_eq!(f1.y_name, "wC12");

        // Different fixed w values: identical field.
        state.w1 = [7.0, -3.0, 2.0, 9.0];
        let f2 = emit_orientation_field(&state, x, y, grid).unwrap();
        assert_eq!(f1.points, f2.points);

        // theta2 = 2/3 zeroes the wD11 component.
        state.theta2 = 2.0 / 3.0;
        let f3 = emit_orientation_field(
            &state,
            WAxis { agent: 0, component: 2 },
            WAxis { agent: 0, component: 3 },
            grid,
        )
        .unwrap();
        for &(_, _, dx, _) in &f3.points {
            assert!(dx.abs() < 1e-12);
        }
    }

    #[test]
    fn csv_emission_shapes() {
        let field =
            emit_vector_field([0.0; 4], [0.0; 4], GridSpec::unit(21), 0.01, 1.0, 0.99).unwrap();
        let csv = field_to_csv(&field);
        // Header plus exactly 21 * 21 rows.
        assert_eq!(csv.lines().count(), 1 + 441);
        assert!(csv.starts_with("x_name,y_name,x,y,dx,dy\n"));

        let traj = run_dynamics(&AnalyzerState::canonical(), 3, 2).unwrap();
        let csv = trajectory_to_csv(&traj);
        assert_eq!(csv.lines().count(), 1 + 4);
        assert!(csv.starts_with("round,theta1,theta2,w1_0"));
    }
}
