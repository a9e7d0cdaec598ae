//! Limit order book with price-time priority.
//!
//! Prices are integer tick counts and volumes integer share counts; the
//! book never touches floating point, so matching is exact. Market
//! orders execute against the single best opposite price level only and
//! discard any unfilled remainder.

pub mod stream;

use std::collections::{BTreeMap, HashMap, VecDeque};

use thiserror::Error;

/// Price in ticks.
pub type Price = i64;
/// Volume in shares.
pub type Volume = i64;
/// Book-assigned order identifier.
pub type OrderId = u64;
/// Agent identifier; [`NO_OWNER`] marks orders the simulator seeds itself.
pub type OwnerId = u32;

pub const NO_OWNER: OwnerId = OwnerId::MAX;

/// Number of price levels carried by a snapshot.
pub const SNAPSHOT_DEPTH: usize = 10;

#[derive(Debug, Error)]
pub enum BookError {
    #[error("order rejected: price must be positive, got {0}")]
    NonPositivePrice(Price),
    #[error("order rejected: volume must be positive, got {0}")]
    NonPositiveVolume(Volume),
    #[error("snapshot has an empty {0} side at the best level")]
    EmptySide(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    Bid,
    Ask,
}

impl Side {
    pub fn opposite(self) -> Side {
        match self {
            Side::Bid => Side::Ask,
            Side::Ask => Side::Bid,
        }
    }
}

/// A resting limit order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Order {
    pub id: OrderId,
    pub side: Side,
    pub price: Price,
    pub volume: Volume,
    pub arrival_seq: u64,
    pub owner: OwnerId,
}

/// One execution between a resting maker order and an incoming taker.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trade {
    pub price: Price,
    pub volume: Volume,
    pub maker_id: OrderId,
    pub taker_id: OrderId,
    pub time: u32,
}

/// One aggregated price level of a snapshot. Unoccupied levels carry a
/// padded price and zero volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LobLevel {
    pub bid_price: Price,
    pub bid_volume: Volume,
    pub ask_price: Price,
    pub ask_volume: Volume,
}

/// Top-`depth` aggregated view of the book at one time step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LobSnapshot {
    pub time: u32,
    pub levels: Vec<LobLevel>,
}

impl LobSnapshot {
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    /// Best bid if the level is occupied.
    pub fn best_bid(&self) -> Option<(Price, Volume)> {
        self.levels
            .first()
            .filter(|l| l.bid_volume > 0)
            .map(|l| (l.bid_price, l.bid_volume))
    }

    pub fn best_ask(&self) -> Option<(Price, Volume)> {
        self.levels
            .first()
            .filter(|l| l.ask_volume > 0)
            .map(|l| (l.ask_price, l.ask_volume))
    }

    /// Mid-price `(best ask + best bid) / 2`; errors when either best
    /// level is unoccupied so callers can decide how to carry forward.
    pub fn mid_price(&self) -> Result<f64, BookError> {
        let (bid, _) = self.best_bid().ok_or(BookError::EmptySide("bid"))?;
        let (ask, _) = self.best_ask().ok_or(BookError::EmptySide("ask"))?;
        Ok((ask + bid) as f64 / 2.0)
    }

    /// Flattened per-step features in column order
    /// `pb1, vb1, pa1, va1, ..., pb10, vb10, pa10, va10`.
    pub fn features(&self) -> Vec<i64> {
        let mut out = Vec::with_capacity(self.levels.len() * 4);
        for l in &self.levels {
            out.push(l.bid_price);
            out.push(l.bid_volume);
            out.push(l.ask_price);
            out.push(l.ask_volume);
        }
        out
    }

    /// Checks the level precedence constraints on occupied levels: ask
    /// prices strictly increase and bid prices strictly decrease with the
    /// level index, and every occupied ask price exceeds every occupied
    /// bid price.
    pub fn validate(&self) -> Result<(), String> {
        let mut prev_ask: Option<Price> = None;
        let mut prev_bid: Option<Price> = None;
        let mut max_bid: Option<Price> = None;
        let mut min_ask: Option<Price> = None;
        for (i, l) in self.levels.iter().enumerate() {
            if l.ask_volume > 0 {
                if let Some(p) = prev_ask {
                    if l.ask_price <= p {
                        return Err(format!(
                            "ask level {} price {} <= level above {}",
                            i + 1,
                            l.ask_price,
                            p
                        ));
                    }
                }
                prev_ask = Some(l.ask_price);
                min_ask = Some(min_ask.map_or(l.ask_price, |m: Price| m.min(l.ask_price)));
            }
            if l.bid_volume > 0 {
                if let Some(p) = prev_bid {
                    if l.bid_price >= p {
                        return Err(format!(
                            "bid level {} price {} >= level above {}",
                            i + 1,
                            l.bid_price,
                            p
                        ));
                    }
                }
                prev_bid = Some(l.bid_price);
                max_bid = Some(max_bid.map_or(l.bid_price, |m: Price| m.max(l.bid_price)));
            }
            if l.ask_volume > 0 && l.ask_price <= 0 {
                return Err(format!("non-positive ask price {}", l.ask_price));
            }
            if l.bid_volume > 0 && l.bid_price <= 0 {
                return Err(format!("non-positive bid price {}", l.bid_price));
            }
            if l.ask_volume < 0 || l.bid_volume < 0 {
                return Err("negative volume".into());
            }
        }
        if let (Some(b), Some(a)) = (max_bid, min_ask) {
            if a <= b {
                return Err(format!("crossed snapshot: max bid {b} >= min ask {a}"));
            }
        }
        Ok(())
    }
}

/// The resting-order book. Single-writer: operations mutate it
/// sequentially; distinct instances are independent.
#[derive(Clone, Debug)]
pub struct OrderBook {
    bids: BTreeMap<Price, VecDeque<Order>>,
    asks: BTreeMap<Price, VecDeque<Order>>,
    // resting orders only
    locations: HashMap<OrderId, (Side, Price)>,
    live: Vec<OrderId>,
    live_pos: HashMap<OrderId, usize>,
    next_order_id: OrderId,
    next_seq: u64,
    time: u32,
    tick_size: u32,
    reference_price: Price,
    bid_volume: Volume,
    ask_volume: Volume,
}

impl Default for OrderBook {
    fn default() -> Self {
        OrderBook::new(1, 10_000)
    }
}

impl OrderBook {
    /// `reference_price` anchors snapshot padding when a side is empty;
    /// `tick_size` is carried as metadata into exported streams.
    pub fn new(tick_size: u32, reference_price: Price) -> Self {
        OrderBook {
            bids: BTreeMap::new(),
            asks: BTreeMap::new(),
            locations: HashMap::new(),
            live: Vec::new(),
            live_pos: HashMap::new(),
            next_order_id: 1,
            next_seq: 1,
            time: 0,
            tick_size,
            reference_price,
            bid_volume: 0,
            ask_volume: 0,
        }
    }

    pub fn tick_size(&self) -> u32 {
        self.tick_size
    }

    pub fn reference_price(&self) -> Price {
        self.reference_price
    }

    /// Sets the timestamp stamped onto subsequent trades.
    pub fn set_time(&mut self, time: u32) {
        self.time = time;
    }

    pub fn best_price(&self, side: Side) -> Option<Price> {
        match side {
            Side::Bid => self.bids.keys().next_back().copied(),
            Side::Ask => self.asks.keys().next().copied(),
        }
    }

    /// Total resting volume on one side.
    pub fn side_volume(&self, side: Side) -> Volume {
        match side {
            Side::Bid => self.bid_volume,
            Side::Ask => self.ask_volume,
        }
    }

    pub fn resting_order_count(&self) -> usize {
        self.live.len()
    }

    /// The id of the `idx`-th resting order in registry order; used for
    /// uniform random cancellation.
    pub fn resting_order_at(&self, idx: usize) -> OrderId {
        self.live[idx]
    }

    pub fn contains_order(&self, id: OrderId) -> bool {
        self.locations.contains_key(&id)
    }

    pub fn order_volume(&self, id: OrderId) -> Option<Volume> {
        let (side, price) = *self.locations.get(&id)?;
        self.queue(side, price)
            .and_then(|q| q.iter().find(|o| o.id == id))
            .map(|o| o.volume)
    }

    fn queue(&self, side: Side, price: Price) -> Option<&VecDeque<Order>> {
        match side {
            Side::Bid => self.bids.get(&price),
            Side::Ask => self.asks.get(&price),
        }
    }

    fn register(&mut self, id: OrderId, side: Side, price: Price) {
        self.locations.insert(id, (side, price));
        self.live_pos.insert(id, self.live.len());
        self.live.push(id);
    }

    fn unregister(&mut self, id: OrderId) {
        self.locations.remove(&id);
        if let Some(pos) = self.live_pos.remove(&id) {
            let last = self.live.pop().expect("registry not empty");
            if last != id {
                self.live[pos] = last;
                self.live_pos.insert(last, pos);
            }
        }
    }

    fn add_volume(&mut self, side: Side, delta: Volume) {
        match side {
            Side::Bid => self.bid_volume += delta,
            Side::Ask => self.ask_volume += delta,
        }
    }

    /// Submits a limit order. Crossable volume executes against the
    /// opposite side best-price-first and arrival-order within a level;
    /// the residual rests. Returns the executed trades and the order id
    /// assigned to the incoming order.
    pub fn submit_limit_order(
        &mut self,
        side: Side,
        price: Price,
        volume: Volume,
        owner: OwnerId,
    ) -> Result<(Vec<Trade>, OrderId), BookError> {
        if price <= 0 {
            return Err(BookError::NonPositivePrice(price));
        }
        if volume <= 0 {
            return Err(BookError::NonPositiveVolume(volume));
        }
        let id = self.next_order_id;
        self.next_order_id += 1;
        let seq = self.next_seq;
        self.next_seq += 1;

        let mut remaining = volume;
        let mut trades = Vec::new();
        loop {
            if remaining == 0 {
                break;
            }
            let Some(best) = self.best_price(side.opposite()) else {
                break;
            };
            let crosses = match side {
                Side::Bid => best <= price,
                Side::Ask => best >= price,
            };
            if !crosses {
                break;
            }
            remaining = self.consume_level(side.opposite(), best, remaining, id, &mut trades);
        }
        if remaining > 0 {
            let order = Order {
                id,
                side,
                price,
                volume: remaining,
                arrival_seq: seq,
                owner,
            };
            let queue = match side {
                Side::Bid => self.bids.entry(price).or_default(),
                Side::Ask => self.asks.entry(price).or_default(),
            };
            queue.push_back(order);
            self.register(id, side, price);
            self.add_volume(side, remaining);
        }
        Ok((trades, id))
    }

    /// Submits a market order. It executes against the single best
    /// opposite price level only; any remainder is discarded, and an
    /// empty opposite side makes the order a no-op.
    pub fn submit_market_order(
        &mut self,
        side: Side,
        volume: Volume,
    ) -> Result<Vec<Trade>, BookError> {
        if volume <= 0 {
            return Err(BookError::NonPositiveVolume(volume));
        }
        let id = self.next_order_id;
        self.next_order_id += 1;
        self.next_seq += 1;
        let mut trades = Vec::new();
        if let Some(best) = self.best_price(side.opposite()) {
            self.consume_level(side.opposite(), best, volume, id, &mut trades);
        }
        Ok(trades)
    }

    /// Removes the full remaining volume of a resting order. Returns
    /// false when the id is not resting (already filled, canceled, or
    /// never accepted).
    pub fn cancel_order(&mut self, id: OrderId) -> bool {
        let Some((side, price)) = self.locations.get(&id).copied() else {
            return false;
        };
        let tree = match side {
            Side::Bid => &mut self.bids,
            Side::Ask => &mut self.asks,
        };
        let queue = tree.get_mut(&price).expect("location index consistent");
        let pos = queue
            .iter()
            .position(|o| o.id == id)
            .expect("location index consistent");
        let removed = queue.remove(pos).expect("position valid");
        if queue.is_empty() {
            tree.remove(&price);
        }
        self.add_volume(side, -removed.volume);
        self.unregister(id);
        true
    }

    fn consume_level(
        &mut self,
        maker_side: Side,
        price: Price,
        mut remaining: Volume,
        taker_id: OrderId,
        trades: &mut Vec<Trade>,
    ) -> Volume {
        let time = self.time;
        let tree = match maker_side {
            Side::Bid => &mut self.bids,
            Side::Ask => &mut self.asks,
        };
        let queue = tree.get_mut(&price).expect("level exists");
        let mut removed_ids = Vec::new();
        let mut consumed: Volume = 0;
        while remaining > 0 {
            let Some(maker) = queue.front_mut() else {
                break;
            };
            let fill = remaining.min(maker.volume);
            trades.push(Trade {
                price,
                volume: fill,
                maker_id: maker.id,
                taker_id,
                time,
            });
            maker.volume -= fill;
            remaining -= fill;
            consumed += fill;
            if maker.volume == 0 {
                removed_ids.push(maker.id);
                queue.pop_front();
            }
        }
        if queue.is_empty() {
            tree.remove(&price);
        }
        self.add_volume(maker_side, -consumed);
        for id in removed_ids {
            self.unregister(id);
        }
        remaining
    }

    /// Aggregated top-`depth` snapshot. Missing levels are padded with
    /// the last occupied price on that side extended one tick per level
    /// (asks up, bids down, floored at one tick) and zero volume; a fully
    /// empty side pads from the opposite best, or from the reference
    /// price when both sides are empty.
    pub fn snapshot(&self, depth: usize, time: u32) -> LobSnapshot {
        let mut asks: Vec<(Price, Volume)> = Vec::with_capacity(depth);
        for (&price, queue) in self.asks.iter().take(depth) {
            asks.push((price, queue.iter().map(|o| o.volume).sum()));
        }
        let mut bids: Vec<(Price, Volume)> = Vec::with_capacity(depth);
        for (&price, queue) in self.bids.iter().rev().take(depth) {
            bids.push((price, queue.iter().map(|o| o.volume).sum()));
        }

        let ask_base = asks
            .last()
            .map(|&(p, _)| p)
            .or_else(|| bids.first().map(|&(p, _)| p + 1))
            .unwrap_or(self.reference_price + 1);
        let bid_base = bids
            .last()
            .map(|&(p, _)| p)
            .or_else(|| asks.first().map(|&(p, _)| p - 1))
            .unwrap_or(self.reference_price - 1);

        let mut levels = Vec::with_capacity(depth);
        for i in 0..depth {
            let (ask_price, ask_volume) = match asks.get(i) {
                Some(&(p, v)) => (p, v),
                None => (ask_base + (i - asks.len()) as Price + 1, 0),
            };
            let (bid_price, bid_volume) = match bids.get(i) {
                Some(&(p, v)) => (p, v),
                None => ((bid_base - (i - bids.len()) as Price - 1).max(1), 0),
            };
            levels.push(LobLevel {
                bid_price,
                bid_volume,
                ask_price,
                ask_volume,
            });
        }
        LobSnapshot { time, levels }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn book() -> OrderBook {
        OrderBook::new(1, 10_000)
    }

    #[test]
    fn resting_ask_on_empty_book() {
        let mut b = book();
        let (trades, id) = b.submit_limit_order(Side::Ask, 10_000, 100, 0).unwrap();
        assert!(trades.is_empty());
        let snap = b.snapshot(10, 1);
        assert_eq!(snap.best_ask(), Some((10_000, 100)));
        assert!(b.contains_order(id));
    }

    #[test]
    fn partial_fill_leaves_residual_on_ask() {
        let mut b = book();
        b.submit_limit_order(Side::Ask, 10_000, 100, 0).unwrap();
        let (trades, _) = b.submit_limit_order(Side::Bid, 10_000, 40, 1).unwrap();
        assert_eq!(trades.len(), 1);
        assert_eq!((trades[0].price, trades[0].volume), (10_000, 40));
        let snap = b.snapshot(10, 1);
        assert_eq!(snap.best_ask(), Some((10_000, 60)));
        assert_eq!(snap.best_bid(), None);
    }

    #[test]
    fn crossing_limit_sweeps_multiple_levels() {
        let mut b = book();
        b.submit_limit_order(Side::Ask, 10_000, 100, 0).unwrap();
        b.submit_limit_order(Side::Ask, 10_001, 50, 0).unwrap();
        let (trades, _) = b.submit_limit_order(Side::Bid, 10_001, 120, 1).unwrap();
        let fills: Vec<(Price, Volume)> = trades.iter().map(|t| (t.price, t.volume)).collect();
        assert_eq!(fills, vec![(10_000, 100), (10_001, 20)]);
        let snap = b.snapshot(10, 1);
        assert_eq!(snap.best_ask(), Some((10_001, 30)));
    }

    #[test]
    fn market_order_fills_best_level_exactly() {
        let mut b = book();
        b.submit_limit_order(Side::Ask, 10_000, 100, 0).unwrap();
        let trades = b.submit_market_order(Side::Bid, 100).unwrap();
        assert_eq!(trades.len(), 1);
        assert_eq!((trades[0].price, trades[0].volume), (10_000, 100));
        assert_eq!(b.best_price(Side::Ask), None);
    }

    #[test]
    fn market_order_against_empty_side_is_noop() {
        let mut b = book();
        b.submit_limit_order(Side::Bid, 9_999, 70, 0).unwrap();
        let before = b.snapshot(10, 0);
        let trades = b.submit_market_order(Side::Bid, 100).unwrap();
        assert!(trades.is_empty());
        assert_eq!(b.snapshot(10, 0), before);
    }

    #[test]
    fn market_order_remainder_is_discarded() {
        let mut b = book();
        b.submit_limit_order(Side::Ask, 10_000, 60, 0).unwrap();
        b.submit_limit_order(Side::Ask, 10_001, 500, 0).unwrap();
        let trades = b.submit_market_order(Side::Bid, 100).unwrap();
        assert_eq!(trades.len(), 1);
        assert_eq!((trades[0].price, trades[0].volume), (10_000, 60));
        // second level untouched
        assert_eq!(b.snapshot(10, 0).best_ask(), Some((10_001, 500)));
    }

    #[test]
    fn cancel_removes_resting_order() {
        let mut b = book();
        let (_, id) = b.submit_limit_order(Side::Ask, 10_000, 100, 0).unwrap();
        b.submit_limit_order(Side::Ask, 10_000, 50, 1).unwrap();
        assert!(b.cancel_order(id));
        assert_eq!(b.snapshot(10, 0).best_ask(), Some((10_000, 50)));
        assert!(!b.cancel_order(id));
    }

    #[test]
    fn cancel_of_filled_order_returns_false() {
        let mut b = book();
        let (_, id) = b.submit_limit_order(Side::Ask, 10_000, 100, 0).unwrap();
        b.submit_market_order(Side::Bid, 100).unwrap();
        let before = b.snapshot(10, 0);
        assert!(!b.cancel_order(id));
        assert_eq!(b.snapshot(10, 0), before);
    }

    #[test]
    fn rejects_non_positive_inputs() {
        let mut b = book();
        assert!(matches!(
            b.submit_limit_order(Side::Bid, 0, 10, 0),
            Err(BookError::NonPositivePrice(0))
        ));
        assert!(matches!(
            b.submit_limit_order(Side::Bid, 10, -5, 0),
            Err(BookError::NonPositiveVolume(-5))
        ));
        assert!(matches!(
            b.submit_market_order(Side::Bid, 0),
            Err(BookError::NonPositiveVolume(0))
        ));
    }

    #[test]
    fn same_price_orders_aggregate_in_snapshot() {
        let mut b = book();
        b.submit_limit_order(Side::Bid, 9_999, 30, 0).unwrap();
        b.submit_limit_order(Side::Bid, 9_999, 45, 1).unwrap();
        assert_eq!(b.snapshot(10, 0).best_bid(), Some((9_999, 75)));
    }

    #[test]
    fn time_priority_within_level() {
        let mut b = book();
        let (_, first) = b.submit_limit_order(Side::Ask, 10_000, 10, 0).unwrap();
        let (_, second) = b.submit_limit_order(Side::Ask, 10_000, 10, 1).unwrap();
        let trades = b.submit_market_order(Side::Bid, 10).unwrap();
        assert_eq!(trades[0].maker_id, first);
        assert!(b.contains_order(second));
    }

    #[test]
    fn snapshot_pads_sparse_sides() {
        let mut b = book();
        b.submit_limit_order(Side::Ask, 10_001, 10, 0).unwrap();
        b.submit_limit_order(Side::Ask, 10_003, 10, 0).unwrap();
        b.submit_limit_order(Side::Ask, 10_007, 10, 0).unwrap();
        for i in 0..10 {
            b.submit_limit_order(Side::Bid, 9_999 - i, 10, 0).unwrap();
        }
        let snap = b.snapshot(10, 0);
        snap.validate().unwrap();
        assert_eq!(snap.levels[2].ask_price, 10_007);
        for i in 3..10 {
            assert_eq!(snap.levels[i].ask_price, 10_007 + (i as Price - 2));
            assert_eq!(snap.levels[i].ask_volume, 0);
        }
        assert_eq!(snap.levels[9].bid_price, 9_990);
    }

    #[test]
    fn snapshot_pads_empty_book_from_reference() {
        let b = book();
        let snap = b.snapshot(10, 0);
        assert_eq!(snap.levels[0].ask_price, 10_002);
        assert_eq!(snap.levels[0].bid_price, 9_998);
        assert_eq!(snap.best_ask(), None);
        snap.validate().unwrap();
    }

    #[test]
    fn mid_price_cases() {
        let mut b = book();
        b.submit_limit_order(Side::Ask, 10_001, 10, 0).unwrap();
        b.submit_limit_order(Side::Bid, 9_999, 10, 0).unwrap();
        assert_eq!(b.snapshot(10, 0).mid_price().unwrap(), 10_000.0);

        let mut b = book();
        b.submit_limit_order(Side::Ask, 10_002, 10, 0).unwrap();
        b.submit_limit_order(Side::Bid, 9_999, 10, 0).unwrap();
        assert_eq!(b.snapshot(10, 0).mid_price().unwrap(), 10_000.5);

        let mut b = book();
        b.submit_limit_order(Side::Ask, 10_002, 10, 0).unwrap();
        assert!(b.snapshot(10, 0).mid_price().is_err());
    }

    #[test]
    fn conservation_on_submit() {
        let mut b = book();
        b.submit_limit_order(Side::Ask, 10_000, 70, 0).unwrap();
        let before = b.side_volume(Side::Bid) + b.side_volume(Side::Ask);
        let (trades, _) = b.submit_limit_order(Side::Bid, 10_000, 100, 1).unwrap();
        let traded: Volume = trades.iter().map(|t| t.volume).sum();
        let after = b.side_volume(Side::Bid) + b.side_volume(Side::Ask);
        // traded volume leaves the maker side; the remainder rests
        assert_eq!(after - before, 100 - 2 * traded);
        assert_eq!(traded, 70);
    }
}
