//! Rule-compliant reachable sets of the ego vehicle.
//!
//! The ego vehicle is modeled as two decoupled double integrators in the
//! curvilinear frame of its current lane. Base sets are boxes over
//! `(s, vs) x (d, vd)`; each step propagates them, removes states whose
//! footprint meets a predicted occupancy, refines boxes on state atoms
//! whose truth is mixed, and advances the DFA of the formula. The input
//! applied from step `k` is part of the symbol read at position `k`.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::actions::{action_to_ltlf, ActionPair};
use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::ltlf::{conjoin, to_dfa, Dfa, Formula, StateId, Tri};
use crate::prediction::OccupancySequence;
use crate::rules::{safe_distance, LaneContext, Predicate, RuleConfig};
use crate::scenario::{EgoParams, Lane, Scenario};

const EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    pub const fn point(x: f64) -> Self {
        Interval { lo: x, hi: x }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn hull(&self, o: &Interval) -> Interval {
        Interval::new(self.lo.min(o.lo), self.hi.max(o.hi))
    }

    /// Closed overlap with tolerance.
    pub fn touches(&self, o: &Interval) -> bool {
        self.lo <= o.hi + EPS && o.lo <= self.hi + EPS
    }

    pub fn contains(&self, x: f64, tol: f64) -> bool {
        self.lo - tol <= x && x <= self.hi + tol
    }

    pub fn intersect(&self, o: &Interval) -> Option<Interval> {
        let lo = self.lo.max(o.lo);
        let hi = self.hi.min(o.hi);
        (lo <= hi).then_some(Interval::new(lo, hi))
    }

    fn cut(&self, c: f64) -> Option<(Interval, Interval)> {
        (self.lo < c && c < self.hi).then(|| (Interval::new(self.lo, c), Interval::new(c, self.hi)))
    }
}

/// The state part of a base set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateBox {
    pub s: Interval,
    pub vs: Interval,
    pub d: Interval,
    pub vd: Interval,
}

impl StateBox {
    pub fn point(s: f64, vs: f64, d: f64, vd: f64) -> Self {
        StateBox { s: Interval::point(s), vs: Interval::point(vs), d: Interval::point(d), vd: Interval::point(vd) }
    }

    fn touches(&self, o: &StateBox) -> bool {
        self.s.touches(&o.s) && self.vs.touches(&o.vs) && self.d.touches(&o.d) && self.vd.touches(&o.vd)
    }

    fn hull(&self, o: &StateBox) -> StateBox {
        StateBox { s: self.s.hull(&o.s), vs: self.vs.hull(&o.vs), d: self.d.hull(&o.d), vd: self.vd.hull(&o.vd) }
    }

    /// Position-velocity volume with a floor so degenerate boxes still order.
    pub fn volume(&self) -> f64 {
        [self.s, self.vs, self.d, self.vd].iter().map(|i| i.width().max(1e-6)).product()
    }

    pub fn contains(&self, s: f64, vs: f64, d: f64, vd: f64, tol: f64) -> bool {
        self.s.contains(s, tol) && self.vs.contains(vs, tol) && self.d.contains(d, tol) && self.vd.contains(vd, tol)
    }
}

/// One node of the reachability graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseSet {
    pub step: usize,
    #[serde(flatten)]
    pub state: StateBox,
    pub parents: Vec<usize>,
    pub children: Vec<usize>,
    /// Three-valued truth of the state atoms of the formula.
    pub labels: BTreeMap<String, Tri>,
    /// DFA states after reading the symbols of steps `0..step`.
    pub dfa_states: BTreeSet<StateId>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReachConfig {
    /// Per-step node budget, enforced by merging boxes.
    pub node_cap: usize,
    /// Value of the braking-justification atom during verification.
    pub fail_safe_active: bool,
    /// Maximum number of pieces a box may be refined into per step.
    pub max_pieces: usize,
}

impl Default for ReachConfig {
    fn default() -> Self {
        ReachConfig { node_cap: 2048, fail_safe_active: false, max_pieces: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReachResult {
    /// Surviving nodes per step `0..=h`.
    pub nodes: Vec<Vec<BaseSet>>,
    pub verified: bool,
    pub first_empty_step: Option<usize>,
    pub formula: String,
    /// Lane whose curvilinear frame the boxes live in.
    pub lane_id: u32,
    pub warnings: Vec<String>,
}

impl ReachResult {
    pub fn node_counts(&self) -> Vec<usize> {
        self.nodes.iter().map(Vec::len).collect()
    }
}

/// Obstacle as seen by the obstacle-parameterized atoms at one step: the
/// rear-most edge and slowest speed of its predicted set.
#[derive(Debug, Clone, Copy)]
struct ObsView {
    s_rear: f64,
    d: Interval,
    v_lo: f64,
    same_dir: bool,
}

#[derive(Debug, Clone)]
struct Band {
    a: Interval,
    /// Values of the input atoms, indexed like the DFA alphabet.
    values: Vec<(usize, bool)>,
}

/// Everything needed to label, split and propagate base sets for one
/// scenario, formula and set of occupancy predictions.
pub struct ReachContext<'a> {
    scenario: &'a Scenario,
    lane: &'a Lane,
    dfa: Dfa,
    formula: Formula,
    preds: Vec<Predicate>,
    params: EgoParams,
    rule_cfg: RuleConfig,
    cfg: ReachConfig,
    dt: f64,
    h: usize,
    front: f64,
    back: f64,
    half_w: f64,
    lane_ranges: HashMap<u32, Interval>,
    d_clip: Interval,
    /// Open forbidden regions `(s, d)` of the ego reference point per step.
    forbidden: Vec<Vec<(Interval, Interval)>>,
    views: Vec<HashMap<u32, ObsView>>,
    bands: Vec<Band>,
}

fn lane_range_in(frame: &Lane, lane: &Lane, near: Point) -> Result<Interval> {
    let (s_l, _) = lane.project(near, f64::INFINITY)?;
    let (l, r) = lane.boundaries_at(s_l);
    let (_, dl) = frame.project(l, f64::INFINITY)?;
    let (_, dr) = frame.project(r, f64::INFINITY)?;
    Ok(Interval::new(dl.min(dr), dl.max(dr)))
}

fn displacement(v: f64, a: f64, dt: f64, v_max: f64) -> f64 {
    let v_end = v + a * dt;
    if a < 0.0 && v_end < 0.0 {
        v * v / (2.0 * -a)
    } else if a > 0.0 && v_end > v_max.max(v) {
        let cap = v_max.max(v);
        let t1 = (cap - v) / a;
        v * t1 + 0.5 * a * t1 * t1 + cap * (dt - t1)
    } else {
        v * dt + 0.5 * a * dt * dt
    }
}

/// One-step interval image of a box under longitudinal input `a_lon` and
/// lateral input `a_lat`. Longitudinal speed stays in `[0, v_max]`.
pub fn propagate(b: &StateBox, a_lon: Interval, a_lat: Interval, v_max: f64, dt: f64) -> StateBox {
    let clamp_v = |v: f64, v0: f64| v.clamp(0.0, v_max.max(v0));
    StateBox {
        s: Interval::new(
            b.s.lo + displacement(b.vs.lo, a_lon.lo, dt, v_max),
            b.s.hi + displacement(b.vs.hi, a_lon.hi, dt, v_max),
        ),
        vs: Interval::new(clamp_v(b.vs.lo + a_lon.lo * dt, b.vs.lo), clamp_v(b.vs.hi + a_lon.hi * dt, b.vs.hi)),
        d: Interval::new(
            b.d.lo + b.vd.lo * dt + 0.5 * a_lat.lo * dt * dt,
            b.d.hi + b.vd.hi * dt + 0.5 * a_lat.hi * dt * dt,
        ),
        vd: Interval::new(b.vd.lo + a_lat.lo * dt, b.vd.hi + a_lat.hi * dt),
    }
}

/// Same as [`propagate`] with the scenario's acceleration bounds.
pub fn propagate_base_set(b: &BaseSet, params: &EgoParams, dt: f64) -> StateBox {
    let lon = Interval::new(params.a_lon_range[0], params.a_lon_range[1]);
    let lat = Interval::new(params.a_lat_range[0], params.a_lat_range[1]);
    propagate(&b.state, lon, lat, params.v_max, dt)
}

fn input_value(p: Predicate, a: f64, params: &EgoParams, cfg: &RuleConfig) -> bool {
    match p {
        Predicate::AccWithinLimit => a.abs() <= params.a_lim,
        Predicate::AccAboveLimit => a > params.a_lim,
        Predicate::AccBelowNegLimit => a < -params.a_lim,
        Predicate::BrakesAbruptly => a < -cfg.a_abrupt,
        _ => unreachable!("not an input atom"),
    }
}

impl<'a> ReachContext<'a> {
    pub fn new(
        scenario: &'a Scenario,
        formula: &Formula,
        occupancies: &[OccupancySequence],
        h: usize,
        cfg: ReachConfig,
    ) -> Result<Self> {
        let dfa = to_dfa(formula)?;
        let preds = dfa.atoms().iter().map(|a| Predicate::parse(a)).collect::<Result<Vec<_>>>()?;
        let lane = scenario.ego_lane();
        let ego = &scenario.ego;
        let params = ego.params;
        let pos = ego.state.position;

        let mut lane_ranges = HashMap::new();
        lane_ranges.insert(lane.id, lane_range_in(lane, lane, pos)?);
        for p in &preds {
            if let Predicate::InLane(id) = p {
                let other = scenario.network.lane(*id).ok_or_else(|| Error::UnknownAtom(p.name()))?;
                lane_ranges.insert(*id, lane_range_in(lane, other, pos)?);
            }
        }
        let half_w = ego.shape.width / 2.0;
        let union = lane_ranges.values().fold(lane_ranges[&lane.id], |acc, r| acc.hull(r));
        let d0 = ego.state.d;
        let d_clip = Interval::new((union.lo + half_w).min(d0), (union.hi - half_w).max(d0));

        let front = ego.front_extent();
        let back = ego.back_extent();
        let mut forbidden = vec![Vec::new(); h + 1];
        let mut views = vec![HashMap::new(); h + 1];
        for occ in occupancies {
            let same_dir = scenario
                .obstacle(occ.obstacle_id)
                .map(|o| {
                    let st = o.current_state();
                    let s = lane.project(st.position, f64::INFINITY).map(|(s, _)| s).unwrap_or(0.0);
                    (st.theta - lane.heading_at(s)).cos() > 0.0 || st.v == 0.0
                })
                .unwrap_or(true);
            for k in 0..=h {
                let mut s_all: Option<Interval> = None;
                let mut d_all: Option<Interval> = None;
                for poly in occ.at(k) {
                    let mut s_iv: Option<Interval> = None;
                    let mut d_iv: Option<Interval> = None;
                    for p in poly {
                        let (s, d) = lane.project(*p, f64::INFINITY)?;
                        s_iv = Some(s_iv.map_or(Interval::point(s), |i| i.hull(&Interval::point(s))));
                        d_iv = Some(d_iv.map_or(Interval::point(d), |i| i.hull(&Interval::point(d))));
                    }
                    let (Some(s_iv), Some(d_iv)) = (s_iv, d_iv) else { continue };
                    forbidden[k].push((
                        Interval::new(s_iv.lo - front, s_iv.hi + back),
                        Interval::new(d_iv.lo - half_w, d_iv.hi + half_w),
                    ));
                    s_all = Some(s_all.map_or(s_iv, |i| i.hull(&s_iv)));
                    d_all = Some(d_all.map_or(d_iv, |i| i.hull(&d_iv)));
                }
                if let (Some(s), Some(d)) = (s_all, d_all) {
                    let v_lo = occ.speeds[k.min(occ.speeds.len() - 1)][0];
                    views[k].insert(occ.obstacle_id, ObsView { s_rear: s.lo, d, v_lo, same_dir });
                }
            }
        }

        let rule_cfg = scenario.rule_config;
        let bands = Self::input_bands(&dfa, &preds, &params, &rule_cfg);
        Ok(ReachContext {
            scenario,
            lane,
            dfa,
            formula: formula.clone(),
            preds,
            params,
            rule_cfg,
            cfg,
            dt: scenario.dt,
            h,
            front,
            back,
            half_w,
            lane_ranges,
            d_clip,
            forbidden,
            views,
            bands,
        })
    }

    /// Longitudinal input range cut where any input atom changes value.
    /// Each band has constant input-atom values.
    fn input_bands(dfa: &Dfa, preds: &[Predicate], params: &EgoParams, cfg: &RuleConfig) -> Vec<Band> {
        let [a_lo, a_hi] = params.a_lon_range;
        let inputs: Vec<(usize, Predicate)> =
            preds.iter().copied().enumerate().filter(|(i, p)| p.is_input_atom() && dfa.uses_atom(*i)).collect();
        let mut cuts: Vec<f64> = [-cfg.a_abrupt, -params.a_lim, params.a_lim]
            .into_iter()
            .filter(|c| *c > a_lo && *c < a_hi)
            .collect();
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        let values = |a: f64| -> Vec<(usize, bool)> {
            inputs.iter().map(|(i, p)| (*i, input_value(*p, a, params, cfg))).collect()
        };
        let mut points = vec![a_lo];
        points.extend(&cuts);
        points.push(a_hi);
        let mut bands: Vec<Band> = Vec::new();
        let mut push = |a: Interval, v: Vec<(usize, bool)>| match bands.last_mut() {
            Some(last) if last.values == v => last.a.hi = a.hi,
            _ => bands.push(Band { a, values: v }),
        };
        for w in points.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            if lo == a_lo {
                push(Interval::point(lo), values(lo));
            }
            push(Interval::new(lo, hi), values(0.5 * (lo + hi)));
            push(Interval::point(hi), values(hi));
        }
        bands
    }

    pub fn dfa(&self) -> &Dfa {
        &self.dfa
    }

    pub fn lane(&self) -> &Lane {
        self.lane
    }

    /// Allowed range of the reference point's lateral offset.
    pub fn drivable_d(&self) -> Interval {
        self.d_clip
    }

    /// Open forbidden regions of the reference point at step `k`.
    pub fn forbidden_at(&self, k: usize) -> &[(Interval, Interval)] {
        &self.forbidden[k.min(self.forbidden.len() - 1)]
    }

    fn speed_caps(&self, s: Interval) -> (f64, f64) {
        let c = &self.rule_cfg;
        let lane_cap = |s: f64| self.scenario.network.speed_limit_at(self.lane, s).unwrap_or(c.speed_limit_default);
        let (a, b) = (lane_cap(s.lo), lane_cap(s.hi));
        (a.min(b), a.max(b))
    }

    fn cap_of(&self, p: Predicate, s: Interval) -> (f64, f64) {
        let c = &self.rule_cfg;
        match p {
            Predicate::KeepsLaneSpeedLimit => self.speed_caps(s),
            Predicate::KeepsFovSpeedLimit => (c.fov_speed_cap, c.fov_speed_cap),
            Predicate::KeepsTypeSpeedLimit => (c.type_speed_cap, c.type_speed_cap),
            _ => (c.braking_speed_cap, c.braking_speed_cap),
        }
    }

    /// Boundary `s*(v)` of the safe-distance atom: the atom holds iff `s < s*(v)`.
    fn safe_boundary(&self, view: &ObsView, v: f64) -> f64 {
        let d = safe_distance(v, view.v_lo, &self.params, self.rule_cfg.a_obs_min).unwrap_or(f64::INFINITY);
        view.s_rear - self.front - d
    }

    fn label_pred(&self, k: usize, p: Predicate, b: &StateBox) -> Result<Tri> {
        let hw = self.half_w;
        Ok(match p {
            Predicate::InStandstill => {
                let e = self.params.v_err;
                Tri::from_counts(b.vs.hi <= e, b.vs.lo >= e)
            }
            Predicate::InLane(id) => {
                let r = self.lane_ranges[&id];
                let (lo, hi) = (r.lo - hw, r.hi + hw);
                Tri::from_counts(b.d.lo >= lo && b.d.hi <= hi, b.d.hi <= lo || b.d.lo >= hi)
            }
            Predicate::Precedes(id) => match self.views[k].get(&id) {
                Some(v) if v.same_dir => {
                    let lat = Tri::from_counts(
                        b.d.lo >= v.d.lo - hw && b.d.hi <= v.d.hi + hw,
                        b.d.hi <= v.d.lo - hw || b.d.lo >= v.d.hi + hw,
                    );
                    let c = v.s_rear - self.front;
                    let ahead = Tri::from_counts(b.s.hi <= c, b.s.lo >= c);
                    kleene_and(lat, ahead)
                }
                _ => Tri::False,
            },
            Predicate::KeepsSafeDistance(id) => match self.views[k].get(&id) {
                Some(v) => Tri::from_counts(
                    b.s.hi <= self.safe_boundary(v, b.vs.hi),
                    b.s.lo >= self.safe_boundary(v, b.vs.lo),
                ),
                None => Tri::False,
            },
            Predicate::BrakingJustification => Tri::from_bool(self.cfg.fail_safe_active),
            Predicate::KeepsLaneSpeedLimit
            | Predicate::KeepsFovSpeedLimit
            | Predicate::KeepsTypeSpeedLimit
            | Predicate::KeepsBrakingSpeedLimit => {
                let (lo, hi) = self.cap_of(p, b.s);
                Tri::from_counts(b.vs.hi <= lo, b.vs.lo >= hi)
            }
            _ => return Err(Error::NotBoxDecidable(p.name())),
        })
    }

    /// Three-valued truth of a state atom on a box at step `k`. Boundaries
    /// have measure zero, so a box is decided once its closure lies in the
    /// closure of one side.
    pub fn label(&self, k: usize, atom: &str, b: &StateBox) -> Result<Tri> {
        let p = Predicate::parse(atom)?;
        if p.is_input_atom() {
            return Err(Error::NotBoxDecidable(atom.to_string()));
        }
        if let Predicate::InLane(id) = p {
            if !self.lane_ranges.contains_key(&id) {
                return Err(Error::UnknownAtom(atom.to_string()));
            }
        }
        self.label_pred(k, p, b)
    }

    fn state_labels(&self, k: usize, b: &StateBox) -> Vec<Tri> {
        self.preds
            .iter()
            .map(|p| if p.is_input_atom() { Tri::Partial } else { self.label_pred(k, *p, b).expect("box-decidable") })
            .collect()
    }

    fn with_band(&self, labels: &[Tri], band: &Band) -> Vec<Tri> {
        let mut out = labels.to_vec();
        for (i, v) in &band.values {
            out[*i] = Tri::from_bool(*v);
        }
        out
    }

    /// Splits a box so that `atom` is decided on each piece where possible.
    /// Pieces are closed and share their cut faces.
    pub fn split(&self, k: usize, atom: &str, b: &StateBox) -> Result<Vec<StateBox>> {
        let p = Predicate::parse(atom)?;
        self.split_pred(k, p, b).ok_or_else(|| Error::Unsplittable(atom.to_string()))
    }

    fn split_pred(&self, k: usize, p: Predicate, b: &StateBox) -> Option<Vec<StateBox>> {
        let hw = self.half_w;
        let on_s = |c: f64| b.s.cut(c).map(|(x, y)| vec![StateBox { s: x, ..*b }, StateBox { s: y, ..*b }]);
        let on_vs = |c: f64| b.vs.cut(c).map(|(x, y)| vec![StateBox { vs: x, ..*b }, StateBox { vs: y, ..*b }]);
        let on_d = |c: f64| b.d.cut(c).map(|(x, y)| vec![StateBox { d: x, ..*b }, StateBox { d: y, ..*b }]);
        match p {
            Predicate::InStandstill => on_vs(self.params.v_err),
            Predicate::InLane(id) => {
                let r = self.lane_ranges.get(&id)?;
                on_d(r.lo - hw).or_else(|| on_d(r.hi + hw))
            }
            Predicate::Precedes(id) => {
                let v = self.views[k].get(&id)?;
                on_d(v.d.lo - hw).or_else(|| on_d(v.d.hi + hw)).or_else(|| on_s(v.s_rear - self.front))
            }
            Predicate::KeepsSafeDistance(id) => {
                let v = self.views[k].get(&id)?;
                let c_true = self.safe_boundary(v, b.vs.hi);
                let c_false = self.safe_boundary(v, b.vs.lo);
                let mut cuts: Vec<f64> = [c_true, c_false].into_iter().filter(|c| b.s.lo < *c && *c < b.s.hi).collect();
                cuts.sort_by(f64::total_cmp);
                cuts.dedup();
                if cuts.is_empty() {
                    // Boundary crosses the box diagonally: halve the speed range.
                    return if b.vs.width() > 0.05 { on_vs(b.vs.mid()) } else { None };
                }
                let mut edges = vec![b.s.lo];
                edges.extend(cuts);
                edges.push(b.s.hi);
                Some(edges.windows(2).map(|w| StateBox { s: Interval::new(w[0], w[1]), ..*b }).collect())
            }
            Predicate::KeepsLaneSpeedLimit
            | Predicate::KeepsFovSpeedLimit
            | Predicate::KeepsTypeSpeedLimit
            | Predicate::KeepsBrakingSpeedLimit => {
                let (lo, hi) = self.cap_of(p, b.s);
                if lo == hi {
                    on_vs(lo)
                } else {
                    None
                }
            }
            _ => None,
        }
    }

    fn ambiguous(&self, labels: &[Tri]) -> bool {
        self.bands.iter().any(|band| self.dfa.label_ambiguous(&self.with_band(labels, band)))
    }

    /// Refines a box until every atom that leaves some pattern undecided is
    /// split, or the piece budget is exhausted.
    fn refine(&self, k: usize, b: StateBox) -> Vec<(StateBox, Vec<Tri>)> {
        let mut work = vec![b];
        let mut out = Vec::new();
        while let Some(b) = work.pop() {
            let labels = self.state_labels(k, &b);
            let budget_left = out.len() + work.len() + 1 < self.cfg.max_pieces;
            let pieces = if budget_left && self.ambiguous(&labels) {
                self.preds.iter().enumerate().find_map(|(i, p)| {
                    (labels[i] == Tri::Partial && !p.is_input_atom() && self.dfa.uses_atom(i))
                        .then(|| self.split_pred(k, *p, &b))
                        .flatten()
                })
            } else {
                None
            };
            match pieces {
                Some(pieces) => work.extend(pieces.into_iter().rev()),
                None => out.push((b, labels)),
            }
        }
        out
    }

    /// Removes states whose footprint meets an occupancy at step `k`.
    /// Lateral splits keep the clipping exact for axis-aligned occupancies.
    fn remove_forbidden(&self, k: usize, b: StateBox) -> Vec<StateBox> {
        let mut boxes = vec![b];
        for (fs, fd) in self.forbidden_at(k) {
            let mut next = Vec::with_capacity(boxes.len());
            for b in boxes {
                let hits = b.s.hi > fs.lo && b.s.lo < fs.hi && b.d.hi > fd.lo && b.d.lo < fd.hi;
                if !hits {
                    next.push(b);
                    continue;
                }
                if b.d.lo < fd.lo {
                    next.push(StateBox { d: Interval::new(b.d.lo, fd.lo), ..b });
                }
                if b.d.hi > fd.hi {
                    next.push(StateBox { d: Interval::new(fd.hi, b.d.hi), ..b });
                }
                let mid = Interval::new(b.d.lo.max(fd.lo), b.d.hi.min(fd.hi));
                if b.s.lo <= fs.lo {
                    next.push(StateBox { s: Interval::new(b.s.lo, fs.lo), d: mid, ..b });
                }
                if b.s.hi >= fs.hi {
                    next.push(StateBox { s: Interval::new(fs.hi, b.s.hi), d: mid, ..b });
                }
            }
            boxes = next;
        }
        boxes
    }

    fn collides(&self, k: usize, b: &StateBox) -> bool {
        self.forbidden_at(k)
            .iter()
            .any(|(fs, fd)| b.s.hi > fs.lo && b.s.lo < fs.hi && b.d.hi > fd.lo && b.d.lo < fd.hi)
    }

    /// DFA successor sets per input band of a labeled node, sink removed.
    fn successors(&self, pre: &BTreeSet<StateId>, labels: &[Tri]) -> Vec<(Interval, BTreeSet<StateId>)> {
        let sink = self.dfa.reject_sink();
        self.bands
            .iter()
            .filter_map(|band| {
                let full = self.with_band(labels, band);
                let next: BTreeSet<StateId> = pre
                    .iter()
                    .flat_map(|q| self.dfa.successors(*q, &full))
                    .filter(|q| Some(*q) != sink)
                    .collect();
                (!next.is_empty()).then_some((band.a, next))
            })
            .collect()
    }

    fn initial_box(&self) -> StateBox {
        let e = &self.scenario.ego.state;
        let rel = e.theta - self.lane.heading_at(e.s);
        StateBox::point(e.s, e.v * rel.cos(), e.d, e.v * rel.sin())
    }

    pub fn compute(&self) -> Result<ReachResult> {
        let b0 = self.initial_box();
        if self.collides(0, &b0) {
            return Err(Error::DegenerateScenario);
        }
        let mut warnings = Vec::new();
        let accepting = self.dfa.accepting();
        let initial: BTreeSet<StateId> = [self.dfa.initial()].into();

        // Forward pass. `layers[k]` holds nodes with their labels and, for
        // k < h, the admissible (input, successor set) groups.
        struct Fwd {
            node: BaseSet,
            groups: Vec<(Interval, BTreeSet<StateId>)>,
        }
        let make_layer = |k: usize, pieces: Vec<(StateBox, Vec<usize>, BTreeSet<StateId>)>| -> Vec<Fwd> {
            let mut layer = Vec::new();
            for (sb, parents, pre) in pieces {
                for (b, labels) in self.refine(k, sb) {
                    let succ = self.successors(&pre, &labels);
                    let groups = if k == self.h {
                        succ.into_iter().filter(|(_, next)| next.contains(&accepting)).collect()
                    } else {
                        group_bands(succ)
                    };
                    let named = self
                        .preds
                        .iter()
                        .zip(&labels)
                        .filter(|(p, _)| !p.is_input_atom())
                        .map(|(p, t)| (p.name(), *t))
                        .collect();
                    layer.push(Fwd {
                        node: BaseSet {
                            step: k,
                            state: b,
                            parents: parents.clone(),
                            children: vec![],
                            labels: named,
                            dfa_states: pre.clone(),
                        },
                        groups,
                    });
                }
            }
            layer
        };

        let mut layers: Vec<Vec<Fwd>> = vec![make_layer(0, vec![(b0, vec![], initial)])];
        let lat = Interval::new(self.params.a_lat_range[0], self.params.a_lat_range[1]);
        for k in 0..self.h {
            let mut raw: Vec<(StateBox, Vec<usize>, BTreeSet<StateId>)> = Vec::new();
            for (i, f) in layers[k].iter().enumerate() {
                for (a, next) in &f.groups {
                    let mut b = propagate(&f.node.state, *a, lat, self.params.v_max, self.dt);
                    match b.d.intersect(&self.d_clip) {
                        Some(d) => b.d = d,
                        None => continue,
                    }
                    raw.push((b, vec![i], next.clone()));
                }
            }
            let merged = merge_touching(raw);
            let mut pieces = Vec::new();
            for (b, parents, pre) in merged {
                for piece in self.remove_forbidden(k + 1, b) {
                    pieces.push((piece, parents.clone(), pre.clone()));
                }
            }
            if pieces.len() > self.cfg.node_cap {
                let msg = format!("step {}: {} boxes exceed the cap of {}; merging", k + 1, pieces.len(), self.cfg.node_cap);
                warn!("{msg}");
                warnings.push(msg);
                pieces = enforce_cap(pieces, self.cfg.node_cap);
            }
            let layer = make_layer(k + 1, pieces);
            let alive = layer.iter().any(|f| !f.groups.is_empty());
            layers.push(layer);
            if !alive {
                break;
            }
        }

        // Backward pass: a node survives if it is admissible and, before
        // the horizon, some child survives.
        let n_layers = layers.len();
        let mut alive: Vec<Vec<bool>> = layers.iter().map(|l| l.iter().map(|f| !f.groups.is_empty()).collect()).collect();
        if n_layers <= self.h {
            alive.iter_mut().for_each(|l| l.iter_mut().for_each(|a| *a = false));
        } else {
            for k in (0..self.h).rev() {
                let mut has_child = vec![false; layers[k].len()];
                for (j, f) in layers[k + 1].iter().enumerate() {
                    if alive[k + 1][j] {
                        for &p in &f.node.parents {
                            has_child[p] = true;
                        }
                    }
                }
                for (i, a) in alive[k].iter_mut().enumerate() {
                    *a &= has_child[i];
                }
            }
        }
        let first_empty_step = (0..=self.h).find(|&k| k >= n_layers || !layers[k].iter().any(|f| !f.groups.is_empty()));

        let mut nodes: Vec<Vec<BaseSet>> = Vec::with_capacity(self.h + 1);
        let mut prev_map: HashMap<usize, usize> = HashMap::new();
        for k in 0..=self.h {
            let mut out = Vec::new();
            let mut map = HashMap::new();
            if k < n_layers {
                for (i, f) in layers[k].iter().enumerate() {
                    if !alive[k][i] {
                        continue;
                    }
                    let mut n = f.node.clone();
                    n.parents = n.parents.iter().filter_map(|p| prev_map.get(p).copied()).collect();
                    map.insert(i, out.len());
                    out.push(n);
                }
            }
            if k > 0 {
                for (j, n) in out.iter().enumerate() {
                    for &p in &n.parents {
                        nodes[k - 1][p].children.push(j);
                    }
                }
            }
            nodes.push(out);
            prev_map = map;
        }
        let verified = first_empty_step.is_none() && nodes.iter().all(|l| !l.is_empty());
        Ok(ReachResult {
            nodes,
            verified,
            first_empty_step: if verified { None } else { first_empty_step.or(Some(self.h)) },
            formula: self.formula.to_string(),
            lane_id: self.lane.id,
            warnings,
        })
    }

    /// Back-projection of a box center into the world frame.
    pub fn world_point(&self, s: f64, d: f64) -> Point {
        self.lane.point_at(s, d)
    }

    pub fn back_extent(&self) -> f64 {
        self.back
    }
}

fn kleene_and(a: Tri, b: Tri) -> Tri {
    match (a, b) {
        (Tri::False, _) | (_, Tri::False) => Tri::False,
        (Tri::True, Tri::True) => Tri::True,
        _ => Tri::Partial,
    }
}

/// Joins contiguous input bands with identical successor sets.
fn group_bands(succ: Vec<(Interval, BTreeSet<StateId>)>) -> Vec<(Interval, BTreeSet<StateId>)> {
    let mut out: Vec<(Interval, BTreeSet<StateId>)> = Vec::new();
    for (a, next) in succ {
        match out.iter_mut().find(|(b, n)| *n == next && b.touches(&a)) {
            Some((b, _)) => *b = b.hull(&a),
            None => out.push((a, next)),
        }
    }
    out
}

type Piece = (StateBox, Vec<usize>, BTreeSet<StateId>);

/// Hull-merges boxes with identical DFA sets that touch, to a fixed point.
fn merge_touching(mut items: Vec<Piece>) -> Vec<Piece> {
    let mut out: Vec<Piece> = Vec::new();
    while let Some(mut cur) = items.pop() {
        loop {
            let hit = out.iter().position(|(b, _, q)| *q == cur.2 && b.touches(&cur.0));
            match hit {
                Some(i) => {
                    let (b, mut parents, _) = out.swap_remove(i);
                    cur.0 = cur.0.hull(&b);
                    parents.append(&mut cur.1);
                    parents.sort_unstable();
                    parents.dedup();
                    cur.1 = parents;
                }
                None => break,
            }
        }
        out.push(cur);
    }
    out.sort_by(|a, b| a.2.cmp(&b.2).then(a.0.s.lo.total_cmp(&b.0.s.lo)).then(a.0.d.lo.total_cmp(&b.0.d.lo)));
    out
}

/// Merges neighbouring boxes (in DFA-set then `s` order) until at most `cap` remain.
fn enforce_cap(mut items: Vec<Piece>, cap: usize) -> Vec<Piece> {
    items.sort_by(|a, b| a.2.cmp(&b.2).then(a.0.s.lo.total_cmp(&b.0.s.lo)).then(a.0.d.lo.total_cmp(&b.0.d.lo)));
    while items.len() > cap.max(1) {
        let mut merged = Vec::with_capacity(items.len() / 2 + 1);
        let mut it = items.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => {
                    let mut parents = a.1;
                    parents.extend(b.1);
                    parents.sort_unstable();
                    parents.dedup();
                    let dfa: BTreeSet<StateId> = a.2.union(&b.2).copied().collect();
                    merged.push((a.0.hull(&b.0), parents, dfa));
                }
                None => merged.push(a),
            }
        }
        items = merged;
    }
    items
}

pub fn compute_reachable_sets(
    scenario: &Scenario,
    formula: &Formula,
    occupancies: &[OccupancySequence],
    h: usize,
) -> Result<ReachResult> {
    ReachContext::new(scenario, formula, occupancies, h, ReachConfig::default())?.compute()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationOutcome {
    pub pair: ActionPair,
    pub verified: bool,
    pub first_empty_step: Option<usize>,
    pub result: ReachResult,
}

/// Verifies one action pair conjoined with the given rule formulas.
pub fn verify(
    scenario: &Scenario,
    pair: ActionPair,
    rules: &[Formula],
    occupancies: &[OccupancySequence],
    h: usize,
) -> Result<VerificationOutcome> {
    verify_with(scenario, pair, rules, occupancies, h, ReachConfig::default())
}

pub fn verify_with(
    scenario: &Scenario,
    pair: ActionPair,
    rules: &[Formula],
    occupancies: &[OccupancySequence],
    h: usize,
    cfg: ReachConfig,
) -> Result<VerificationOutcome> {
    let ctx = LaneContext::of(&scenario.network, &scenario.ego.state)?;
    let mut parts = vec![action_to_ltlf(pair, &ctx)?];
    parts.extend(rules.iter().cloned());
    let formula = conjoin(parts).expect("non-empty");
    let result = ReachContext::new(scenario, &formula, occupancies, h, cfg)?.compute()?;
    Ok(VerificationOutcome { pair, verified: result.verified, first_empty_step: result.first_empty_step, result })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorridorBox {
    pub s: Interval,
    pub d: Interval,
    pub vs: Interval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corridor {
    pub lane_id: u32,
    pub steps: Vec<Vec<CorridorBox>>,
    /// Box centers `(s, d)` along one root-to-horizon lineage.
    pub reference: Vec<[f64; 2]>,
}

/// Surviving boxes per step and a reference path through the largest
/// child at every step.
pub fn extract_corridor(result: &ReachResult) -> Result<Corridor> {
    if !result.verified {
        return Err(Error::Unverified);
    }
    let steps = result
        .nodes
        .iter()
        .map(|l| l.iter().map(|n| CorridorBox { s: n.state.s, d: n.state.d, vs: n.state.vs }).collect())
        .collect();
    let mut reference = Vec::with_capacity(result.nodes.len());
    let mut cur = result.nodes[0]
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.state.volume().total_cmp(&b.1.state.volume()))
        .map(|(i, _)| i);
    for k in 0..result.nodes.len() {
        let Some(i) = cur else { break };
        let n = &result.nodes[k][i];
        reference.push([n.state.s.mid(), n.state.d.mid()]);
        cur = n.children.iter().copied().max_by(|a, b| {
            let layer = &result.nodes[k + 1];
            layer[*a].state.volume().total_cmp(&layer[*b].state.volume())
        });
    }
    Ok(Corridor { lane_id: result.lane_id, steps, reference })
}

/// Machine-readable summary of one verification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReachReport {
    pub pair: ActionPair,
    pub formula: String,
    pub verified: bool,
    pub first_empty_step: Option<usize>,
    pub node_counts: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corridor: Option<Corridor>,
}

impl From<&VerificationOutcome> for ReachReport {
    fn from(o: &VerificationOutcome) -> Self {
        ReachReport {
            pair: o.pair,
            formula: o.result.formula.clone(),
            verified: o.verified,
            first_empty_step: o.first_empty_step,
            node_counts: o.result.node_counts(),
            corridor: extract_corridor(&o.result).ok(),
        }
    }
}
