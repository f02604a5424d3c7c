//! UAV-user simulator: kinematics, slot energy, channel/rate, AoI bookkeeping
//! and the constrained-MDP step that ties them together.
//!
//! One episode runs for a fixed number of slots. In each slot the UAV flies
//! up to `max_flight_dist` meters, hovers for the remainder of the slot, and
//! uplinks from one selected user. Reward is the negative average AoI of the
//! users the action could serve; cost is the slot's energy draw.

use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mobility::{self, MobilityParams};
use crate::rng::EpisodeRng;

/// Errors raised by the simulator.
#[derive(Debug, Error)]
pub enum EnvError {
    #[error("flight distance {0} outside [0, {1}]")]
    InvalidFlightDistance(f64, f64),
    #[error("no users in the service area")]
    EmptyUserSet,
    #[error("served user id {0} not present")]
    UnknownUser(u64),
    #[error("step requested after the final slot (t = {t}, horizon = {horizon})")]
    EpisodeOver { t: usize, horizon: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

/// Horizontal coordinates in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Position2D {
    pub x: f64,
    pub y: f64,
}

impl Position2D {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: Position2D) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }

    /// Bearing from `self` toward `target`, wrapped into [0, 2π).
    pub fn bearing_to(&self, target: Position2D) -> f64 {
        let raw = (target.y - self.y).atan2(target.x - self.x);
        raw.rem_euclid(std::f64::consts::TAU)
    }

    pub fn in_box(&self, x_max: f64, y_max: f64) -> bool {
        self.x.abs() <= x_max && self.y.abs() <= y_max
    }
}

/// One terrestrial user: position, Gauss-Markov velocity state and AoI.
///
/// `mean_vel` is the user's fixed drift vector; `vel` is the instantaneous
/// velocity the mobility recurrence updates each slot. AoI counts slots since
/// the last successfully collected packet and never drops below 1.
#[derive(Debug, Clone, PartialEq)]
pub struct UserRecord {
    pub id: u64,
    pub pos: Position2D,
    pub vel: [f64; 2],
    pub mean_vel: [f64; 2],
    pub aoi: u32,
}

/// Full CMDP state at the start of a slot.
///
/// `users` is kept in a canonical order (AoI descending, then distance to the
/// UAV ascending, then id ascending). The continuous selection code in an
/// action is decoded against this ordering, so rank 0 is always the most
/// urgent user.
#[derive(Debug, Clone)]
pub struct EnvState {
    /// Slot index in [1, horizon].
    pub t: usize,
    pub uav_pos: Position2D,
    pub users: Vec<UserRecord>,
    /// Cumulative energy drawn since slot 1, joules.
    pub energy_spent: f64,
    /// Reward emitted by the previous slot; re-emitted while the area is empty.
    pub last_reward: f64,
}

impl EnvState {
    /// Re-sorts users into the canonical decode order for the current UAV position.
    pub fn canonicalize(&mut self) {
        let uav = self.uav_pos;
        self.users.sort_by(|a, b| {
            b.aoi
                .cmp(&a.aoi)
                .then_with(|| a.pos.distance(uav).total_cmp(&b.pos.distance(uav)))
                .then_with(|| a.id.cmp(&b.id))
        });
    }
}

/// Continuous action: flight distance, flight angle, user-selection code.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionCommand {
    /// Meters, in [0, max_flight_dist].
    pub flight_dist: f64,
    /// Radians, in [0, 2π).
    pub flight_angle: f64,
    /// Linear user-selection code in [-1, 1].
    pub selection_code: f64,
}

impl ActionCommand {
    pub fn hover() -> Self {
        Self {
            flight_dist: 0.0,
            flight_angle: 0.0,
            selection_code: 0.0,
        }
    }

    /// Clamps each component into its admissible range (angle is wrapped).
    pub fn clamped(self, cfg: &EnvConfig) -> Self {
        Self {
            flight_dist: self.flight_dist.clamp(0.0, cfg.max_flight_dist),
            flight_angle: self.flight_angle.rem_euclid(std::f64::consts::TAU),
            selection_code: self.selection_code.clamp(-1.0, 1.0),
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.flight_dist, self.flight_angle, self.selection_code]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self {
            flight_dist: a[0],
            flight_angle: a[1],
            selection_code: a[2],
        }
    }
}

/// Maps an action onto [-1, 1]^3 for sequence modeling: distance and angle are
/// rescaled by their ranges, the selection code is already in range.
pub fn normalize_action(cmd: &ActionCommand, max_flight_dist: f64) -> [f64; 3] {
    [
        2.0 * cmd.flight_dist / max_flight_dist - 1.0,
        cmd.flight_angle / std::f64::consts::PI - 1.0,
        cmd.selection_code,
    ]
}

/// Inverse of [`normalize_action`], with components clamped to their ranges.
pub fn denormalize_action(a: [f64; 3], max_flight_dist: f64) -> ActionCommand {
    ActionCommand {
        flight_dist: ((a[0] + 1.0) * 0.5 * max_flight_dist).clamp(0.0, max_flight_dist),
        flight_angle: ((a[1] + 1.0) * std::f64::consts::PI).rem_euclid(std::f64::consts::TAU),
        selection_code: a[2].clamp(-1.0, 1.0),
    }
}

/// Result of advancing the simulator by one slot.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub next_state: EnvState,
    /// Negative average AoI of the user set the action could serve.
    pub reward: f64,
    /// Slot energy draw, joules.
    pub cost: f64,
    pub served_user: Option<u64>,
    pub served_ok: bool,
}

/// Every physical constant of the scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    /// Service-area half-width along x, meters (|x| <= x_max).
    pub x_max: f64,
    /// Service-area half-width along y, meters.
    pub y_max: f64,
    /// Episode length in slots.
    pub horizon: usize,
    /// Slot duration, seconds.
    pub slot_duration: f64,
    /// UAV altitude, meters.
    pub altitude: f64,
    /// Per-slot flight distance cap, meters.
    pub max_flight_dist: f64,
    /// UAV cruise speed, m/s.
    pub max_speed: f64,
    /// Power while flying, watts.
    pub flight_power: f64,
    /// Power while hovering, watts.
    pub hover_power: f64,
    /// Episode energy budget, joules.
    pub energy_budget: f64,
    /// Channel bandwidth, Hz.
    pub bandwidth: f64,
    /// User uplink transmit power, watts.
    pub user_tx_power: f64,
    /// Noise power over the band, watts.
    pub noise_power: f64,
    /// Uplink task size, bits.
    pub packet_bits: f64,
    /// Channel gain at 1 m reference distance.
    pub ref_gain: f64,
    /// Target average user density (also the initial user count, rounded).
    pub rho: f64,
    /// UAV position at slot 1.
    pub uav_start: [f64; 2],
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            x_max: 250.0,
            y_max: 250.0,
            horizon: 100,
            slot_duration: 5.0,
            altitude: 60.0,
            max_flight_dist: 90.0,
            max_speed: 30.0,
            flight_power: 110.0,
            hover_power: 80.0,
            energy_budget: 90_000.0,
            bandwidth: 1.0e6,
            user_tx_power: 0.5,
            noise_power: 1.0e-11,
            packet_bits: 3.0e7,
            ref_gain: 1.0e-5,
            rho: 20.0,
            uav_start: [100.0, 100.0],
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let positive = [
            ("x_max", self.x_max),
            ("y_max", self.y_max),
            ("slot_duration", self.slot_duration),
            ("altitude", self.altitude),
            ("max_flight_dist", self.max_flight_dist),
            ("max_speed", self.max_speed),
            ("flight_power", self.flight_power),
            ("hover_power", self.hover_power),
            ("energy_budget", self.energy_budget),
            ("bandwidth", self.bandwidth),
            ("user_tx_power", self.user_tx_power),
            ("noise_power", self.noise_power),
            ("packet_bits", self.packet_bits),
            ("ref_gain", self.ref_gain),
            ("rho", self.rho),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(EnvError::InvalidConfig(format!(
                    "{name} must be strictly positive, got {v}"
                )));
            }
        }
        if self.horizon == 0 {
            return Err(EnvError::InvalidConfig("horizon must be >= 1".into()));
        }
        if self.max_flight_dist / self.max_speed >= self.slot_duration {
            return Err(EnvError::InvalidConfig(format!(
                "max_flight_dist / max_speed = {} must be < slot_duration = {} so hover time stays positive",
                self.max_flight_dist / self.max_speed,
                self.slot_duration
            )));
        }
        let start = Position2D::new(self.uav_start[0], self.uav_start[1]);
        if !start.in_box(self.x_max, self.y_max) {
            return Err(EnvError::InvalidConfig(format!(
                "uav_start ({}, {}) outside the service area",
                start.x, start.y
            )));
        }
        Ok(())
    }

    pub fn hover_slot_energy(&self) -> f64 {
        self.hover_power * self.slot_duration
    }
}

/// Moves the UAV by `d` meters along `angle`, clamping into the service box.
///
/// Returns the new position; if clamping shortened the move, the distance
/// actually flown is the straight-line distance to the clamped point (see
/// [`effective_distance`]).
pub fn propagate_uav(
    pos: Position2D,
    d: f64,
    angle: f64,
    cfg: &EnvConfig,
) -> Result<Position2D, EnvError> {
    if !(0.0..=cfg.max_flight_dist).contains(&d) {
        return Err(EnvError::InvalidFlightDistance(d, cfg.max_flight_dist));
    }
    let raw = Position2D::new(pos.x + d * angle.cos(), pos.y + d * angle.sin());
    Ok(Position2D::new(
        raw.x.clamp(-cfg.x_max, cfg.x_max),
        raw.y.clamp(-cfg.y_max, cfg.y_max),
    ))
}

/// Distance actually flown after boundary clamping.
pub fn effective_distance(from: Position2D, to: Position2D) -> f64 {
    from.distance(to)
}

/// Splits a slot into (flight_time, hover_time) for a flown distance.
pub fn slot_times(d_effective: f64, cfg: &EnvConfig) -> (f64, f64) {
    let flight = d_effective / cfg.max_speed;
    (flight, cfg.slot_duration - flight)
}

/// Slot energy draw: flight power over the flight phase plus hover power over
/// the service phase.
pub fn slot_energy(flight_time: f64, hover_time: f64, cfg: &EnvConfig) -> f64 {
    debug_assert!(
        (flight_time + hover_time - cfg.slot_duration).abs() <= 1e-9,
        "slot phases must fill the slot"
    );
    cfg.flight_power * flight_time + cfg.hover_power * hover_time
}

/// Line-of-sight channel power gain between the hovering UAV and a user.
pub fn channel_gain(uav_pos: Position2D, user_pos: Position2D, cfg: &EnvConfig) -> f64 {
    let horiz2 = (uav_pos.x - user_pos.x).powi(2) + (uav_pos.y - user_pos.y).powi(2);
    cfg.ref_gain / (cfg.altitude * cfg.altitude + horiz2)
}

/// Shannon uplink rate for a given channel gain, bits/s.
pub fn achievable_rate(gain: f64, cfg: &EnvConfig) -> f64 {
    cfg.bandwidth * (1.0 + gain * cfg.user_tx_power / cfg.noise_power).log2()
}

/// Whether the user's packet fits into the hover phase at the achievable rate.
pub fn service_success(hover_time: f64, gain: f64, cfg: &EnvConfig) -> bool {
    debug_assert!(hover_time > 0.0);
    cfg.packet_bits / hover_time <= achievable_rate(gain, cfg)
}

/// AoI recurrence: reset to 1 on successful service, otherwise age by one slot.
pub fn update_aoi(
    users: &mut [UserRecord],
    served_user: Option<u64>,
    served_ok: bool,
) -> Result<(), EnvError> {
    if let Some(id) = served_user {
        if !users.iter().any(|u| u.id == id) {
            return Err(EnvError::UnknownUser(id));
        }
    }
    for u in users.iter_mut() {
        if served_ok && served_user == Some(u.id) {
            u.aoi = 1;
        } else {
            u.aoi += 1;
        }
    }
    Ok(())
}

/// Arithmetic mean AoI over the in-area users.
pub fn average_aoi(users: &[UserRecord]) -> Result<f64, EnvError> {
    if users.is_empty() {
        return Err(EnvError::EmptyUserSet);
    }
    Ok(users.iter().map(|u| u.aoi as f64).sum::<f64>() / users.len() as f64)
}

/// Decodes the continuous selection code onto a user rank in [0, k-1].
pub fn decode_user_selection(code: f64, k: usize) -> usize {
    assert!(k >= 1, "decode requires at least one user");
    if k == 1 {
        return 0;
    }
    let idx = ((code + 1.0) * 0.5 * (k - 1) as f64).round();
    (idx.max(0.0) as usize).min(k - 1)
}

/// Inverse of [`decode_user_selection`]: the code whose decode is `index`.
pub fn encode_user_selection(index: usize, k: usize) -> f64 {
    assert!(k >= 1 && index < k);
    if k == 1 {
        return 0.0;
    }
    2.0 * index as f64 / (k - 1) as f64 - 1.0
}

/// Advances the CMDP by one slot.
///
/// Within-slot order: decode the target against the state's user ordering,
/// fly (with boundary clamp), serve at the new position, apply the AoI
/// recurrence, then user mobility and arrivals/departures. The reward is the
/// negative post-update average AoI of the users present before arrivals, so
/// it reflects exactly the set the action could serve; arrivals inherit that
/// same average as their initial AoI.
pub fn step(
    state: &EnvState,
    action: &ActionCommand,
    cfg: &EnvConfig,
    mob: &MobilityParams,
    rng: &mut EpisodeRng,
    next_user_id: &mut u64,
) -> Result<StepOutcome, EnvError> {
    if state.t > cfg.horizon {
        return Err(EnvError::EpisodeOver {
            t: state.t,
            horizon: cfg.horizon,
        });
    }
    if state.users.is_empty() {
        return Err(EnvError::EmptyUserSet);
    }

    let target_idx = decode_user_selection(action.selection_code, state.users.len());
    let target_id = state.users[target_idx].id;
    let target_pos = state.users[target_idx].pos;

    let new_pos = propagate_uav(state.uav_pos, action.flight_dist, action.flight_angle, cfg)?;
    let d_eff = effective_distance(state.uav_pos, new_pos);
    let (flight_time, hover_time) = slot_times(d_eff, cfg);
    let energy = slot_energy(flight_time, hover_time, cfg);

    // Service is evaluated at the destination: the UAV is stationary while it uplinks.
    let gain = channel_gain(new_pos, target_pos, cfg);
    let served_ok = service_success(hover_time, gain, cfg);

    let mut users = state.users.clone();
    update_aoi(&mut users, Some(target_id), served_ok)?;
    let avg_post = average_aoi(&users)?;
    let reward = -avg_post;

    for u in users.iter_mut() {
        *u = mobility::gm_step(u, mob, cfg, rng);
    }
    let users = mobility::arrivals_departures(users, mob, avg_post, cfg, rng, next_user_id);

    let mut next_state = EnvState {
        t: state.t + 1,
        uav_pos: new_pos,
        users,
        energy_spent: state.energy_spent + energy,
        last_reward: reward,
    };
    next_state.canonicalize();

    Ok(StepOutcome {
        next_state,
        reward,
        cost: energy,
        served_user: Some(target_id),
        served_ok,
    })
}

/// Slot executed while the service area is empty: the UAV holds position,
/// hover energy accrues, the previous reward is carried, and mobility may
/// bring new users in (with AoI 1, there being no average to inherit).
pub fn hover_fallback_step(
    state: &EnvState,
    cfg: &EnvConfig,
    mob: &MobilityParams,
    rng: &mut EpisodeRng,
    next_user_id: &mut u64,
) -> Result<StepOutcome, EnvError> {
    if state.t > cfg.horizon {
        return Err(EnvError::EpisodeOver {
            t: state.t,
            horizon: cfg.horizon,
        });
    }
    debug_assert!(state.users.is_empty(), "fallback is for empty-area slots");
    let energy = cfg.hover_slot_energy();
    let users = mobility::arrivals_departures(Vec::new(), mob, 0.0, cfg, rng, next_user_id);

    let mut next_state = EnvState {
        t: state.t + 1,
        uav_pos: state.uav_pos,
        users,
        energy_spent: state.energy_spent + energy,
        last_reward: state.last_reward,
    };
    next_state.canonicalize();

    Ok(StepOutcome {
        next_state,
        reward: state.last_reward,
        cost: energy,
        served_user: None,
        served_ok: false,
    })
}

/// Strict energy-budget check (the budget constraint is a strict inequality).
pub fn energy_feasible(state: &EnvState, cfg: &EnvConfig) -> bool {
    state.energy_spent < cfg.energy_budget
}

/// Owns one episode's state, rng stream and user-id allocator.
#[derive(Debug, Clone)]
pub struct Environment {
    pub cfg: EnvConfig,
    pub mob: MobilityParams,
    state: EnvState,
    rng: EpisodeRng,
    next_user_id: u64,
}

impl Environment {
    /// Spawns the initial user population (count = rho rounded, at least one,
    /// all with AoI 1) and places the UAV at its start position.
    pub fn new(cfg: EnvConfig, mob: MobilityParams, seed: u64) -> Result<Self, EnvError> {
        cfg.validate()?;
        mob.validate()
            .map_err(|e| EnvError::InvalidConfig(e.to_string()))?;
        let mut rng = EpisodeRng::seed_from_u64(seed);
        let initial_count = (cfg.rho.round() as usize).max(1);
        let mut next_user_id = 0u64;
        let mut users = Vec::with_capacity(initial_count);
        for _ in 0..initial_count {
            users.push(mobility::spawn_user(&mob, &cfg, &mut rng, &mut next_user_id));
        }
        let mut state = EnvState {
            t: 1,
            uav_pos: Position2D::new(cfg.uav_start[0], cfg.uav_start[1]),
            users,
            energy_spent: 0.0,
            last_reward: -1.0,
        };
        state.canonicalize();
        Ok(Self {
            cfg,
            mob,
            state,
            rng,
            next_user_id,
        })
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn done(&self) -> bool {
        self.state.t > self.cfg.horizon
    }

    /// Executes one action; fails on an empty service area (use
    /// [`Environment::hover_fallback`] for that case).
    pub fn step(&mut self, action: &ActionCommand) -> Result<StepOutcome, EnvError> {
        let outcome = step(
            &self.state,
            action,
            &self.cfg,
            &self.mob,
            &mut self.rng,
            &mut self.next_user_id,
        )?;
        self.state = outcome.next_state.clone();
        Ok(outcome)
    }

    /// Executes the empty-area hover slot.
    pub fn hover_fallback(&mut self) -> Result<StepOutcome, EnvError> {
        let outcome = hover_fallback_step(
            &self.state,
            &self.cfg,
            &self.mob,
            &mut self.rng,
            &mut self.next_user_id,
        )?;
        self.state = outcome.next_state.clone();
        Ok(outcome)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mobility::MobilityParams;

    fn cfg() -> EnvConfig {
        EnvConfig::default()
    }

    fn user(id: u64, x: f64, y: f64, aoi: u32) -> UserRecord {
        UserRecord {
            id,
            pos: Position2D::new(x, y),
            vel: [0.0, 0.0],
            mean_vel: [0.0, 0.0],
            aoi,
        }
    }

    #[test]
    fn propagate_axis_aligned() {
        let c = cfg();
        let p = propagate_uav(Position2D::new(0.0, 0.0), 10.0, 0.0, &c).unwrap();
        assert!((p.x - 10.0).abs() < 1e-12 && p.y.abs() < 1e-12);
        let p = propagate_uav(
            Position2D::new(0.0, 0.0),
            90.0,
            std::f64::consts::FRAC_PI_2,
            &c,
        )
        .unwrap();
        assert!(p.x.abs() < 1e-12 && (p.y - 90.0).abs() < 1e-12);
    }

    #[test]
    fn propagate_clamps_and_shortens_effective_distance() {
        let c = cfg();
        let from = Position2D::new(240.0, 0.0);
        let p = propagate_uav(from, 90.0, 0.0, &c).unwrap();
        assert_eq!((p.x, p.y), (250.0, 0.0));
        // Scalar geometry oracle: straight line to the clamped point.
        let expected = ((250.0f64 - 240.0).powi(2) + 0.0f64).sqrt();
        assert!((effective_distance(from, p) - expected).abs() < 1e-12);
    }

    #[test]
    fn propagate_rejects_out_of_range_distance() {
        let c = cfg();
        assert!(propagate_uav(Position2D::new(0.0, 0.0), 91.0, 0.0, &c).is_err());
        assert!(propagate_uav(Position2D::new(0.0, 0.0), -1.0, 0.0, &c).is_err());
    }

    #[test]
    fn slot_times_split() {
        let c = cfg();
        assert_eq!(slot_times(90.0, &c), (3.0, 2.0));
        assert_eq!(slot_times(0.0, &c), (0.0, 5.0));
        assert_eq!(slot_times(45.0, &c), (1.5, 3.5));
    }

    #[test]
    fn slot_energy_values() {
        let c = cfg();
        assert!((slot_energy(3.0, 2.0, &c) - 490.0).abs() < 1e-12);
        assert!((slot_energy(0.0, 5.0, &c) - 400.0).abs() < 1e-12);
        assert!((slot_energy(1.5, 3.5, &c) - 445.0).abs() < 1e-12);
    }

    #[test]
    fn channel_gain_overhead_and_offset() {
        let c = cfg();
        let uav = Position2D::new(0.0, 0.0);
        let overhead = channel_gain(uav, Position2D::new(0.0, 0.0), &c);
        assert!((overhead - 1.0e-5 / 3600.0).abs() / overhead < 1e-12);
        let offset = channel_gain(uav, Position2D::new(200.0, 0.0), &c);
        assert!((offset - 1.0e-5 / 43_600.0).abs() / offset < 1e-12);
        // Monotone in horizontal distance.
        let mut last = overhead;
        for d in [10.0, 50.0, 120.0, 300.0] {
            let g = channel_gain(uav, Position2D::new(d, 0.0), &c);
            assert!(g < last);
            last = g;
        }
    }

    #[test]
    fn achievable_rate_values() {
        let c = cfg();
        // Independent straight-line evaluation of the rate formula.
        let oracle = |h: f64| c.bandwidth * (1.0 + h * c.user_tx_power / c.noise_power).log2();
        for h in [2.778e-9, 2.294e-10, 1.0e-12] {
            let r = achievable_rate(h, &c);
            assert!((r - oracle(h)).abs() <= 1e-9 * oracle(h).max(1.0));
        }
        assert!((achievable_rate(2.778e-9, &c) - 7.13e6).abs() < 0.02e6);
        assert!((achievable_rate(2.294e-10, &c) - 3.64e6).abs() < 0.02e6);
        assert_eq!(achievable_rate(0.0, &c), 0.0);
    }

    #[test]
    fn service_threshold() {
        let c = cfg();
        // Overhead-ish user: rate ~7.13e6 >= 3e7 / 4.5 = 6.67e6.
        assert!(service_success(4.5, 2.778e-9, &c));
        // Distant user: rate ~3.64e6 < 6.67e6.
        assert!(!service_success(4.5, 2.294e-10, &c));
        // Full-slot hover with a gain strong enough for the whole packet.
        let g_needed = ((c.packet_bits / c.slot_duration / c.bandwidth).exp2() - 1.0)
            * c.noise_power
            / c.user_tx_power;
        assert!(service_success(c.slot_duration, g_needed * 1.01, &c));
        assert!(!service_success(c.slot_duration, g_needed * 0.99, &c));
    }

    #[test]
    fn service_monotone_in_distance() {
        let c = cfg();
        let uav = Position2D::new(0.0, 0.0);
        let hover = 4.5;
        let mut prev_served = true;
        for d in 0..60 {
            let g = channel_gain(uav, Position2D::new(d as f64 * 10.0, 0.0), &c);
            let s = service_success(hover, g, &c);
            assert!(prev_served || !s, "service regained at larger distance");
            prev_served = s;
        }
    }

    #[test]
    fn aoi_update_branches() {
        let mut users = vec![user(0, 0.0, 0.0, 3)];
        update_aoi(&mut users, None, false).unwrap();
        assert_eq!(users[0].aoi, 4);

        let mut users = vec![user(0, 0.0, 0.0, 7)];
        update_aoi(&mut users, Some(0), true).unwrap();
        assert_eq!(users[0].aoi, 1);

        let mut users = vec![user(0, 0.0, 0.0, 7)];
        update_aoi(&mut users, Some(0), false).unwrap();
        assert_eq!(users[0].aoi, 8);

        let mut users = vec![user(0, 0.0, 0.0, 1)];
        assert!(update_aoi(&mut users, Some(9), true).is_err());
    }

    #[test]
    fn average_aoi_values() {
        let users: Vec<_> = [1u32, 3, 5]
            .iter()
            .enumerate()
            .map(|(i, &a)| user(i as u64, 0.0, 0.0, a))
            .collect();
        assert_eq!(average_aoi(&users).unwrap(), 3.0);
        assert_eq!(average_aoi(&[user(0, 0.0, 0.0, 9)]).unwrap(), 9.0);
        let fresh: Vec<_> = (0..4).map(|i| user(i, 0.0, 0.0, 1)).collect();
        assert_eq!(average_aoi(&fresh).unwrap(), 1.0);
        assert!(average_aoi(&[]).is_err());
    }

    #[test]
    fn selection_decode_endpoints_and_midpoint() {
        assert_eq!(decode_user_selection(-1.0, 5), 0);
        assert_eq!(decode_user_selection(1.0, 5), 4);
        assert_eq!(decode_user_selection(0.0, 5), 2);
        assert_eq!(decode_user_selection(0.7, 1), 0);
    }

    #[test]
    fn selection_roundtrip_and_surjectivity() {
        for k in 1..12usize {
            let mut seen = vec![false; k];
            for i in 0..k {
                let code = encode_user_selection(i, k);
                assert!((-1.0..=1.0).contains(&code));
                assert_eq!(decode_user_selection(code, k), i);
            }
            // Sweeping the code hits every rank.
            for s in 0..=1000 {
                let code = -1.0 + 2.0 * s as f64 / 1000.0;
                seen[decode_user_selection(code, k)] = true;
            }
            assert!(seen.iter().all(|&b| b));
        }
    }

    #[test]
    fn step_hover_over_fresh_user_serves_it() {
        let mut c = cfg();
        c.packet_bits = 1.0e6; // small task, easily served in a full-slot hover
        c.rho = 1.0;
        let mob = MobilityParams::frozen();
        let state = EnvState {
            t: 1,
            uav_pos: Position2D::new(0.0, 0.0),
            users: vec![user(0, 0.0, 0.0, 1)],
            energy_spent: 0.0,
            last_reward: -1.0,
        };
        let mut rng = EpisodeRng::seed_from_u64(7);
        let mut next_id = 1;
        let out = step(
            &state,
            &ActionCommand::hover(),
            &c,
            &mob,
            &mut rng,
            &mut next_id,
        )
        .unwrap();
        assert!(out.served_ok);
        assert_eq!(out.reward, -1.0);
        assert!((out.cost - 400.0).abs() < 1e-12);
        assert_eq!(out.next_state.users[0].aoi, 1);
    }

    #[test]
    fn step_unreachable_target_fails_service_and_ages_everyone() {
        let c = cfg();
        let mob = MobilityParams::frozen();
        let state = EnvState {
            t: 1,
            uav_pos: Position2D::new(-240.0, -240.0),
            users: vec![user(0, 240.0, 240.0, 5), user(1, 230.0, 240.0, 2)],
            energy_spent: 0.0,
            last_reward: -1.0,
        };
        let mut rng = EpisodeRng::seed_from_u64(7);
        let mut next_id = 2;
        // Select rank 0 (the aoi-5 user far away), hover in place.
        let action = ActionCommand {
            flight_dist: 0.0,
            flight_angle: 0.0,
            selection_code: -1.0,
        };
        let out = step(&state, &action, &c, &mob, &mut rng, &mut next_id).unwrap();
        assert!(!out.served_ok);
        let aois: Vec<_> = out
            .next_state
            .users
            .iter()
            .map(|u| (u.id, u.aoi))
            .collect();
        assert!(aois.contains(&(0, 6)) && aois.contains(&(1, 3)));
        assert_eq!(out.reward, -4.5);
    }

    #[test]
    fn canonical_order_is_aoi_then_distance_then_id() {
        let mut state = EnvState {
            t: 1,
            uav_pos: Position2D::new(0.0, 0.0),
            users: vec![
                user(3, 50.0, 0.0, 2),
                user(1, 120.0, 0.0, 9),
                user(0, 50.0, 0.0, 9),
                user(2, 50.0, 0.0, 2),
            ],
            energy_spent: 0.0,
            last_reward: -1.0,
        };
        state.canonicalize();
        let ids: Vec<_> = state.users.iter().map(|u| u.id).collect();
        assert_eq!(ids, vec![0, 1, 2, 3]);
    }

    #[test]
    fn episode_energy_accounting_is_exact() {
        let c = cfg();
        let mob = MobilityParams::default();
        let mut env = Environment::new(c.clone(), mob, 42).unwrap();
        let mut total = 0.0;
        let mut rng = EpisodeRng::seed_from_u64(1);
        for _ in 0..c.horizon {
            let out = if env.state().users.is_empty() {
                env.hover_fallback().unwrap()
            } else {
                use rand::Rng;
                let a = ActionCommand {
                    flight_dist: rng.gen_range(0.0..=c.max_flight_dist),
                    flight_angle: rng.gen_range(0.0..std::f64::consts::TAU),
                    selection_code: rng.gen_range(-1.0..=1.0),
                };
                env.step(&a).unwrap()
            };
            total += out.cost;
            assert!(out.cost > 0.0);
            assert!(out.reward <= -1.0);
        }
        let rel = (total - env.state().energy_spent).abs() / total;
        assert!(rel <= 1e-9, "sum of costs must equal energy_spent");
        assert!(env.step(&ActionCommand::hover()).is_err(), "past horizon");
    }

    #[test]
    fn determinism_bitwise_across_runs() {
        let c = cfg();
        let mob = MobilityParams::default();
        let run = || {
            let mut env = Environment::new(c.clone(), mob.clone(), 9).unwrap();
            let mut log = Vec::new();
            for i in 0..c.horizon {
                let a = ActionCommand {
                    flight_dist: (i % 10) as f64 * 9.0,
                    flight_angle: (i % 7) as f64,
                    selection_code: -1.0 + (i % 5) as f64 * 0.5,
                };
                let out = if env.state().users.is_empty() {
                    env.hover_fallback().unwrap()
                } else {
                    env.step(&a).unwrap()
                };
                log.push((
                    out.reward.to_bits(),
                    out.cost.to_bits(),
                    out.next_state.uav_pos.x.to_bits(),
                    out.next_state.uav_pos.y.to_bits(),
                    out.served_user,
                    out.served_ok,
                ));
            }
            log
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn energy_feasibility_boundary_is_strict() {
        let c = cfg();
        let mut state = EnvState {
            t: 1,
            uav_pos: Position2D::new(0.0, 0.0),
            users: vec![],
            energy_spent: 0.0,
            last_reward: -1.0,
        };
        assert!(energy_feasible(&state, &c));
        state.energy_spent = c.energy_budget;
        assert!(!energy_feasible(&state, &c));
    }

    #[test]
    fn all_hover_episode_stays_within_default_budget() {
        let c = cfg();
        let total = c.hover_slot_energy() * c.horizon as f64;
        assert_eq!(total, 40_000.0);
        assert!(total < c.energy_budget);
    }
}
