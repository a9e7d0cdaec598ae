//! PGPS agent-based market model.
//!
//! 125 liquidity providers place limit orders around the touch and 125
//! liquidity takers send market orders or cancel resting orders, driving
//! one [`OrderBook`]. The six calibratable parameters are
//! `w = [delta, lambda0, c_lambda, delta_s, alpha, mu]`.
//!
//! Limit prices quote away from the submitting side's best: asks at
//! `best_ask + offset + 1`, bids at `best_bid - offset - 1` with
//! `offset = floor(-lambda(t) * ln(u))`, so provider orders never cross.
//! Market orders execute at the single best opposite level. Every agent
//! decision draws from a generator keyed by `(seed, step, agent)`, making
//! runs reproducible and agent decisions order-independent.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

use crate::book::{LobSnapshot, OrderBook, Price, Side, Volume, NO_OWNER, SNAPSHOT_DEPTH};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("parameter {name} = {value} outside [{lo}, {hi}]")]
    ParamOutOfBounds {
        name: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("book rejected an order: {0}")]
    Book(#[from] crate::book::BookError),
    #[error("bad config file: {0}")]
    ConfigFile(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// The six calibratable model parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PgpsParams {
    /// Base intensity of the limit-price offset distribution.
    pub lambda0: f64,
    /// Gain of the offset intensity on taker-side imbalance.
    pub c_lambda: f64,
    /// Step size of the taker-side random walk.
    pub delta_s: f64,
    /// Per-step probability that a provider submits a limit order.
    pub alpha: f64,
    /// Per-step probability that a taker submits a market order.
    pub mu: f64,
    /// Per-step probability that a taker cancels a resting order.
    pub delta: f64,
}

/// Names of the parameter vector coordinates, in `w` order.
pub const PARAM_NAMES: [&str; 6] = ["delta", "lambda0", "c_lambda", "delta_s", "alpha", "mu"];

/// Sampling/calibration box per coordinate, in `w` order.
pub const PARAM_BOUNDS: [(f64, f64); 6] = [
    (0.005, 0.05),   // delta
    (1.0, 200.0),    // lambda0
    (1.0, 20.0),     // c_lambda
    (0.0005, 0.003), // delta_s
    (0.05, 0.45),    // alpha
    (0.005, 0.085),  // mu
];

impl PgpsParams {
    /// Parameter vector in `w` order `[delta, lambda0, c_lambda, delta_s,
    /// alpha, mu]`.
    pub fn to_vector(&self) -> [f64; 6] {
        [
            self.delta,
            self.lambda0,
            self.c_lambda,
            self.delta_s,
            self.alpha,
            self.mu,
        ]
    }

    pub fn from_vector(w: [f64; 6]) -> Self {
        PgpsParams {
            delta: w[0],
            lambda0: w[1],
            c_lambda: w[2],
            delta_s: w[3],
            alpha: w[4],
            mu: w[5],
        }
    }

    /// Checks every coordinate against the sampling box.
    pub fn validate(&self) -> Result<(), SimError> {
        for (i, &value) in self.to_vector().iter().enumerate() {
            let (lo, hi) = PARAM_BOUNDS[i];
            if !(value >= lo && value <= hi) {
                return Err(SimError::ParamOutOfBounds {
                    name: PARAM_NAMES[i],
                    value,
                    lo,
                    hi,
                });
            }
        }
        Ok(())
    }

    /// Midpoint of the sampling box.
    pub fn midpoint() -> Self {
        let mut w = [0.0; 6];
        for (i, (lo, hi)) in PARAM_BOUNDS.iter().enumerate() {
            w[i] = 0.5 * (lo + hi);
        }
        PgpsParams::from_vector(w)
    }
}

/// Fixed (non-calibrated) run configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n_providers: u32,
    pub n_takers: u32,
    /// Recorded steps after warmup.
    pub horizon: u32,
    pub seed: u64,
    /// Initial price anchor, in ticks.
    pub initial_price: Price,
    /// Leading steps discarded from the output.
    pub warmup: u32,
    /// Shares per order.
    pub order_volume: Volume,
    pub tick_size: u32,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_providers: 125,
            n_takers: 125,
            horizon: 3600,
            seed: 0,
            initial_price: 10_000,
            warmup: 100,
            order_volume: 100,
            tick_size: 1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.horizon == 0 {
            return Err(SimError::InvalidConfig("horizon must be positive".into()));
        }
        if self.initial_price <= 1 {
            return Err(SimError::InvalidConfig(
                "initial price must exceed one tick".into(),
            ));
        }
        if self.order_volume <= 0 {
            return Err(SimError::InvalidConfig(
                "order volume must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// State of the taker-side buy probability walk.
#[derive(Clone, Copy, Debug)]
pub struct TakerFlow {
    /// Probability that a market order is buy-side, in `[0, 1]`.
    pub q_taker: f64,
    /// Precomputed long-run mean of `(q_taker - 0.5)^2`.
    pub q_var: f64,
}

/// One step of the mean-reverting walk: with probability
/// `0.5 + |q - 0.5|` the step moves toward 0.5 by `delta_s`, otherwise
/// away; at exactly 0.5 the two directions are equally likely. The
/// result is clamped to `[0, 1]`.
pub fn step_q_taker(q: f64, delta_s: f64, rng: &mut impl Rng) -> f64 {
    let u: f64 = rng.gen();
    let toward_center = u < 0.5 + (q - 0.5).abs();
    let direction = if q > 0.5 {
        if toward_center {
            -1.0
        } else {
            1.0
        }
    } else if q < 0.5 {
        if toward_center {
            1.0
        } else {
            -1.0
        }
    } else {
        // centered: the same draw picks the side with equal probability
        if u < 0.5 {
            1.0
        } else {
            -1.0
        }
    };
    (q + direction * delta_s).clamp(0.0, 1.0)
}

/// Monte Carlo estimate of the long-run mean of `(q_taker - 0.5)^2`,
/// computed over `iters` steps of the walk started at 0.5.
pub fn precompute_q_variance(delta_s: f64, iters: u64, seed: u64) -> f64 {
    let mut rng = stream_rng(seed, 0, Q_WALK_AGENT);
    let mut q = 0.5;
    let mut acc = 0.0f64;
    for _ in 0..iters {
        q = step_q_taker(q, delta_s, &mut rng);
        let d = q - 0.5;
        acc += d * d;
    }
    acc / iters as f64
}

/// Offset intensity `lambda0 * (1 + |q - 0.5| / sqrt(q_var) * c_lambda)`.
pub fn lambda_t(params: &PgpsParams, flow: &TakerFlow) -> f64 {
    params.lambda0 * (1.0 + (flow.q_taker - 0.5).abs() / flow.q_var.sqrt() * params.c_lambda)
}

/// Draws a limit order price and volume. The offset from the own-side
/// best price is `floor(-lambda(t) * ln(u))` with `u` uniform on (0, 1];
/// asks are placed above the best ask and bids below the best bid, one
/// tick beyond the offset, floored at one tick. An empty side falls back
/// to the book's reference price.
pub fn draw_limit_order(
    side: Side,
    book: &OrderBook,
    params: &PgpsParams,
    flow: &TakerFlow,
    volume: Volume,
    rng: &mut impl Rng,
) -> (Price, Volume) {
    let best = book.best_price(side).unwrap_or(book.reference_price());
    let u: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
    let offset = (-lambda_t(params, flow) * u.ln()).floor() as Price;
    let price = match side {
        Side::Ask => best + offset + 1,
        Side::Bid => best - offset - 1,
    };
    (price.max(1), volume)
}

const Q_WALK_AGENT: u32 = u32::MAX;
const Q_VAR_STREAM: u64 = 0x515f // tag distinguishing the variance
    ^ 0xA5A5_5A5A_0000_0000;

/// Generator for one `(seed, step, agent)` decision stream.
fn stream_rng(seed: u64, step: u32, agent: u32) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..12].copy_from_slice(&step.to_le_bytes());
    key[12..16].copy_from_slice(&agent.to_le_bytes());
    key[16..24].copy_from_slice(b"PGPSSTRM");
    ChaCha8Rng::from_seed(key)
}

/// Runs the model for `warmup + horizon` steps and returns one snapshot
/// per post-warmup step. Deterministic in `(params, config)`.
///
/// Per step: each provider submits a limit order with probability
/// `alpha` (side uniform); each taker submits a market order with
/// probability `mu` (bid side with probability `q_taker`) and, with
/// probability `delta`, cancels one uniformly random resting order; the
/// market/cancel draws are independent. `q_taker` advances once at the
/// end of the step.
pub fn simulate(params: &PgpsParams, config: &SimConfig) -> Result<Vec<LobSnapshot>, SimError> {
    params.validate()?;
    config.validate()?;

    let mut book = OrderBook::new(config.tick_size, config.initial_price);
    book.submit_limit_order(
        Side::Bid,
        config.initial_price - 1,
        config.order_volume,
        NO_OWNER,
    )?;
    book.submit_limit_order(
        Side::Ask,
        config.initial_price + 1,
        config.order_volume,
        NO_OWNER,
    )?;

    let q_var = precompute_q_variance(
        params.delta_s,
        100_000,
        config.seed ^ Q_VAR_STREAM,
    );
    let mut flow = TakerFlow {
        q_taker: 0.5,
        q_var,
    };

    let total_steps = config.warmup + config.horizon;
    let mut snapshots = Vec::with_capacity(config.horizon as usize);
    for step in 1..=total_steps {
        let recorded_time = step.saturating_sub(config.warmup);
        book.set_time(recorded_time);

        for provider in 0..config.n_providers {
            let mut rng = stream_rng(config.seed, step, provider);
            if rng.gen::<f64>() < params.alpha {
                let side = if rng.gen::<f64>() < 0.5 {
                    Side::Bid
                } else {
                    Side::Ask
                };
                let (price, volume) =
                    draw_limit_order(side, &book, params, &flow, config.order_volume, &mut rng);
                book.submit_limit_order(side, price, volume, provider)?;
            }
        }

        for taker in 0..config.n_takers {
            let agent = config.n_providers + taker;
            let mut rng = stream_rng(config.seed, step, agent);
            if rng.gen::<f64>() < params.mu {
                let side = if rng.gen::<f64>() < flow.q_taker {
                    Side::Bid
                } else {
                    Side::Ask
                };
                book.submit_market_order(side, config.order_volume)?;
            }
            if rng.gen::<f64>() < params.delta {
                let count = book.resting_order_count();
                if count > 0 {
                    let id = book.resting_order_at(rng.gen_range(0..count));
                    book.cancel_order(id);
                }
            }
        }

        let mut q_rng = stream_rng(config.seed, step, Q_WALK_AGENT);
        flow.q_taker = step_q_taker(flow.q_taker, params.delta_s, &mut q_rng);

        if step > config.warmup {
            snapshots.push(book.snapshot(SNAPSHOT_DEPTH, recorded_time));
        }
    }
    Ok(snapshots)
}

/// Flat key=value run configuration file covering both the model
/// parameters and the simulation settings.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub lambda0: f64,
    pub c_lambda: f64,
    pub delta_s: f64,
    pub alpha: f64,
    pub mu: f64,
    pub delta: f64,
    pub n_providers: u32,
    pub n_takers: u32,
    pub horizon: u32,
    pub seed: u64,
    pub initial_price: Price,
    pub warmup: u32,
    pub order_volume: Volume,
    pub tick_size: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::new(&PgpsParams::midpoint(), &SimConfig::default())
    }
}

impl RunConfig {
    pub fn new(params: &PgpsParams, config: &SimConfig) -> Self {
        RunConfig {
            lambda0: params.lambda0,
            c_lambda: params.c_lambda,
            delta_s: params.delta_s,
            alpha: params.alpha,
            mu: params.mu,
            delta: params.delta,
            n_providers: config.n_providers,
            n_takers: config.n_takers,
            horizon: config.horizon,
            seed: config.seed,
            initial_price: config.initial_price,
            warmup: config.warmup,
            order_volume: config.order_volume,
            tick_size: config.tick_size,
        }
    }

    pub fn params(&self) -> PgpsParams {
        PgpsParams {
            lambda0: self.lambda0,
            c_lambda: self.c_lambda,
            delta_s: self.delta_s,
            alpha: self.alpha,
            mu: self.mu,
            delta: self.delta,
        }
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            n_providers: self.n_providers,
            n_takers: self.n_takers,
            horizon: self.horizon,
            seed: self.seed,
            initial_price: self.initial_price,
            warmup: self.warmup,
            order_volume: self.order_volume,
            tick_size: self.tick_size,
        }
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| SimError::ConfigFile(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), SimError> {
        let text = toml::to_string(self).map_err(|e| SimError::ConfigFile(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}
