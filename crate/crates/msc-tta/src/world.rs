//! Deterministic synthetic environment: zone schedules, weather and daylight
//! dynamics, and labeled sample synthesis.
//!
//! Samples are Gaussian-perturbed class prototypes. Each zone permutes a set
//! of shared anchor directions and adds a zone-specific offset per class, so
//! the same feature region can mean different classes in different zones; a
//! single linear model is capacity-limited while per-zone models are not.
//! Weather and daylight add global additive shifts, producing the drift that
//! online adaptation has to track.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::domain::{AgentId, ClassId, Sample, Timestamp, ZoneId};
use crate::error::{Error, Result};
use crate::rng::{self, keyed_rng, time_key};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeatherKind {
    Clear,
    Rain,
    Fog,
}

pub const WEATHER_KINDS: [WeatherKind; 3] = [WeatherKind::Clear, WeatherKind::Rain, WeatherKind::Fog];

impl WeatherKind {
    pub fn index(self) -> usize {
        match self {
            WeatherKind::Clear => 0,
            WeatherKind::Rain => 1,
            WeatherKind::Fog => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Daylight {
    Day,
    Night,
}

impl Daylight {
    pub fn index(self) -> usize {
        match self {
            Daylight::Day => 0,
            Daylight::Night => 1,
        }
    }
}

/// Sun altitude above this angle (degrees) counts as day.
pub const DAYLIGHT_THRESHOLD_DEG: f64 = 5.0;

/// Interpolated weather at one instant. Outside transitions exactly one kind
/// has weight 1; during a transition two kinds blend linearly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeatherState {
    /// Weights for [clear, rain, fog]; they sum to 1.
    pub weights: [f64; 3],
    pub sun_altitude_deg: f64,
}

impl WeatherState {
    pub fn dominant(&self) -> WeatherKind {
        let mut best = 0;
        for k in 1..3 {
            if self.weights[k] > self.weights[best] {
                best = k;
            }
        }
        WEATHER_KINDS[best]
    }

    pub fn daylight(&self) -> Daylight {
        if self.sun_altitude_deg > DAYLIGHT_THRESHOLD_DEG {
            Daylight::Day
        } else {
            Daylight::Night
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeatherMode {
    /// Clear day for the whole horizon.
    Static,
    /// Periodic weather switches and a sun-altitude curve.
    Dynamic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub seed: u64,
    pub horizon_s: f64,
    pub classes: usize,
    pub feature_dim: usize,
    pub pixels: usize,
    pub zones: usize,
    pub agents: usize,
    pub noise_sigma: f64,
    pub weather_mode: WeatherMode,
    /// Defaults to horizon / 30 (600 s at the 5 h horizon).
    pub weather_period_s: Option<f64>,
    /// Defaults to horizon / 1800 (10 s at the 5 h horizon).
    pub transition_s: Option<f64>,
    /// When > 0, sample content blends into the upcoming zone during this
    /// window before a zone change, while the cell assignment still follows
    /// the schedule.
    pub boundary_blend_s: f64,
    /// Zone dwell time bounds as fractions of the horizon.
    pub dwell_min_frac: f64,
    pub dwell_max_frac: f64,
    /// Duty-cycle bounds as fractions of the horizon: agents alternate
    /// active periods of duration uniform in [on_min, on_max] with inactive
    /// gaps uniform in [off_min, off_max]. Off bounds of zero disable the
    /// cycle and keep every agent active over the whole horizon.
    pub duty_on_min_frac: f64,
    pub duty_on_max_frac: f64,
    pub duty_off_min_frac: f64,
    pub duty_off_max_frac: f64,
    /// Zone class priors are Dirichlet(alpha) draws; alpha < 1 concentrates
    /// mass on a few classes per zone.
    pub prior_alpha: f64,
    /// Minimum class probability after flooring the Dirichlet draw.
    pub prior_floor: f64,
    /// Magnitude of the shared class anchor directions.
    pub class_scale: f64,
    /// Magnitude of the zone-specific prototype offsets.
    pub zone_scale: f64,
    /// Magnitude of the weather/daylight feature shifts.
    pub weather_scale: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            horizon_s: 18_000.0,
            classes: 6,
            feature_dim: 16,
            pixels: 32,
            zones: 7,
            agents: 12,
            noise_sigma: 0.8,
            weather_mode: WeatherMode::Dynamic,
            weather_period_s: None,
            transition_s: None,
            boundary_blend_s: 0.0,
            dwell_min_frac: 1.0 / 15.0,
            dwell_max_frac: 1.0 / 6.0,
            duty_on_min_frac: 1.0 / 18.0,
            duty_on_max_frac: 1.0 / 9.0,
            duty_off_min_frac: 1.0 / 36.0,
            duty_off_max_frac: 1.0 / 18.0,
            prior_alpha: 0.3,
            prior_floor: 0.01,
            class_scale: 2.0,
            zone_scale: 2.0,
            weather_scale: 1.5,
        }
    }
}

impl WorldConfig {
    pub fn weather_period(&self) -> f64 {
        self.weather_period_s.unwrap_or(self.horizon_s / 30.0)
    }

    pub fn transition_len(&self) -> f64 {
        self.transition_s.unwrap_or(self.horizon_s / 1800.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.agents == 0 {
            return Err(Error::config("agent count must be positive"));
        }
        if self.classes < 2 {
            return Err(Error::config("need at least 2 classes"));
        }
        if self.zones == 0 || self.pixels == 0 || self.feature_dim == 0 {
            return Err(Error::config("zones, pixels and feature_dim must be positive"));
        }
        if !(self.horizon_s > 0.0) {
            return Err(Error::config("horizon must be positive"));
        }
        if !(self.noise_sigma > 0.0) {
            return Err(Error::config("noise sigma must be positive"));
        }
        if !(self.dwell_min_frac > 0.0 && self.dwell_max_frac >= self.dwell_min_frac) {
            return Err(Error::config("invalid dwell fractions"));
        }
        if self.duty_off_min_frac < 0.0
            || self.duty_off_max_frac < self.duty_off_min_frac
            || (self.duty_off_max_frac > 0.0
                && !(self.duty_on_min_frac > 0.0 && self.duty_on_max_frac >= self.duty_on_min_frac))
        {
            return Err(Error::config("invalid duty-cycle fractions"));
        }
        if !(self.prior_alpha > 0.0) || !(self.prior_floor >= 0.0 && self.prior_floor < 1.0 / self.classes as f64) {
            return Err(Error::config("invalid prior shape parameters"));
        }
        let period = self.weather_period();
        if !(period > self.transition_len() * 2.0) {
            return Err(Error::config(
                "weather period must be much longer than the transition length",
            ));
        }
        Ok(())
    }
}

/// Per-agent activity interval and piecewise-constant zone path.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AgentSchedule {
    pub agent: AgentId,
    pub start: f64,
    pub end: f64,
    /// (segment start time, zone); right-continuous at transitions.
    pub segments: Vec<(f64, ZoneId)>,
    /// Half-open [a, b) inactivity gaps from the duty cycle.
    pub off: Vec<(f64, f64)>,
}

impl AgentSchedule {
    pub fn is_on(&self, t: f64) -> bool {
        t >= self.start && t <= self.end && !self.off.iter().any(|&(a, b)| t >= a && t < b)
    }

    pub fn zone_at(&self, t: f64) -> Option<ZoneId> {
        if !self.is_on(t) {
            return None;
        }
        let idx = self.segments.partition_point(|&(s, _)| s <= t);
        Some(self.segments[idx.saturating_sub(1)].1)
    }

    /// Next zone change strictly after `t`, if any.
    pub fn next_change_after(&self, t: f64) -> Option<(f64, ZoneId)> {
        let idx = self.segments.partition_point(|&(s, _)| s <= t);
        self.segments.get(idx).copied()
    }
}

/// Frozen schedules and distribution parameters, fully determined by the seed.
#[derive(Clone, Debug)]
pub struct WorldState {
    pub cfg: WorldConfig,
    /// prototypes[zone][class] in R^d.
    pub prototypes: Vec<Vec<Vec<f64>>>,
    /// priors[zone]: simplex over classes.
    pub priors: Vec<Vec<f64>>,
    /// shifts[kind][daylight] in R^d; clear day is the zero reference.
    pub shifts: [[Vec<f64>; 2]; 3],
    /// Weather kind per period (empty in static mode).
    pub weather_periods: Vec<WeatherKind>,
    pub schedules: Vec<AgentSchedule>,
}

fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

fn unit_vector(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Build the frozen world from a config. Same seed, same world, bit for bit.
pub fn build_world(cfg: &WorldConfig) -> Result<WorldState> {
    cfg.validate()?;
    let d = cfg.feature_dim;
    let c = cfg.classes;
    let z = cfg.zones;

    let mut prng = keyed_rng(cfg.seed, rng::domain::WORLD_PARAMS, 0, 0, 0);

    // Shared class anchors; each zone assigns them to classes through its own
    // permutation, so a single global linear model faces label conflicts.
    let anchors: Vec<Vec<f64>> = (0..c).map(|_| unit_vector(&mut prng, d)).collect();
    let mut prototypes = Vec::with_capacity(z);
    for zone in 0..z {
        let mut perm: Vec<usize> = (0..c).collect();
        if zone > 0 {
            perm.shuffle(&mut prng);
        }
        let mut per_zone = Vec::with_capacity(c);
        for class in 0..c {
            let offset = unit_vector(&mut prng, d);
            let proto: Vec<f64> = (0..d)
                .map(|i| cfg.class_scale * anchors[perm[class]][i] + cfg.zone_scale * offset[i])
                .collect();
            per_zone.push(proto);
        }
        prototypes.push(per_zone);
    }

    // Zone class priors: floored Dirichlet(alpha), resampled until every
    // pair of zones is at least 0.1 apart in total variation. Alpha < 1
    // makes each zone dominated by a few classes, so a single stream only
    // covers the full class set by pooling across zones.
    let gamma = rand_distr::Gamma::new(cfg.prior_alpha, 1.0)
        .map_err(|e| Error::config(format!("invalid prior_alpha: {e}")))?;
    let priors = loop {
        let mut priors = Vec::with_capacity(z);
        for _ in 0..z {
            let mut p: Vec<f64> = (0..c).map(|_| prng.sample::<f64, _>(gamma).max(1e-300)).collect();
            let floor = cfg.prior_floor;
            let sum: f64 = p.iter().sum();
            for v in &mut p {
                *v = *v / sum * (1.0 - floor * c as f64) + floor;
            }
            priors.push(p);
        }
        let mut ok = true;
        'outer: for i in 0..z {
            for j in (i + 1)..z {
                if total_variation(&priors[i], &priors[j]) < 0.1 {
                    ok = false;
                    break 'outer;
                }
            }
        }
        if ok {
            break priors;
        }
    };

    // Weather/daylight feature shifts; clear day is the reference condition.
    let mut shifts: [[Vec<f64>; 2]; 3] = Default::default();
    for kind in 0..3 {
        for daylight in 0..2 {
            shifts[kind][daylight] = if kind == 0 && daylight == 0 {
                vec![0.0; d]
            } else {
                unit_vector(&mut prng, d)
                    .into_iter()
                    .map(|x| x * cfg.weather_scale)
                    .collect()
            };
        }
    }

    let weather_periods = match cfg.weather_mode {
        WeatherMode::Static => Vec::new(),
        WeatherMode::Dynamic => build_weather_sequence(cfg)?,
    };

    let schedules = build_schedules(cfg);

    Ok(WorldState {
        cfg: cfg.clone(),
        prototypes,
        priors,
        shifts,
        weather_periods,
        schedules,
    })
}

/// Sun altitude in degrees: piecewise linear from -15 at t=0 through the 5
/// degree daylight threshold at horizon/5, a 45 degree noon at horizon/2,
/// back through the threshold at 4/5 horizon and down to -15 at the horizon.
pub fn sun_altitude(cfg: &WorldConfig, t: f64) -> f64 {
    match cfg.weather_mode {
        WeatherMode::Static => 45.0,
        WeatherMode::Dynamic => {
            let h = cfg.horizon_s;
            let knots = [
                (0.0, -15.0),
                (0.2 * h, DAYLIGHT_THRESHOLD_DEG),
                (0.5 * h, 45.0),
                (0.8 * h, DAYLIGHT_THRESHOLD_DEG),
                (h, -15.0),
            ];
            for w in knots.windows(2) {
                let (t0, a0) = w[0];
                let (t1, a1) = w[1];
                if t <= t1 {
                    return a0 + (a1 - a0) * (t - t0) / (t1 - t0);
                }
            }
            -15.0
        }
    }
}

fn build_weather_sequence(cfg: &WorldConfig) -> Result<Vec<WeatherKind>> {
    let period = cfg.weather_period();
    let n = (cfg.horizon_s / period).ceil() as usize;
    if n == 0 {
        return Err(Error::config("horizon too short for one weather period"));
    }
    // Classify periods by the daylight at their midpoint, then spread the
    // three kinds evenly within each daylight class (4 night + 6 day periods
    // per kind at the default 5 h horizon).
    let mut night_slots = Vec::new();
    let mut day_slots = Vec::new();
    for i in 0..n {
        let mid = (i as f64 + 0.5) * period;
        if sun_altitude(cfg, mid.min(cfg.horizon_s)) > DAYLIGHT_THRESHOLD_DEG {
            day_slots.push(i);
        } else {
            night_slots.push(i);
        }
    }
    let mut wrng = keyed_rng(cfg.seed, rng::domain::WEATHER, 0, 0, 0);
    for attempt in 0..1000 {
        let mut seq = vec![WeatherKind::Clear; n];
        for slots in [&night_slots, &day_slots] {
            let mut kinds: Vec<WeatherKind> = (0..slots.len()).map(|k| WEATHER_KINDS[k % 3]).collect();
            kinds.shuffle(&mut wrng);
            for (&slot, &kind) in slots.iter().zip(kinds.iter()) {
                seq[slot] = kind;
            }
        }
        let has_repeat = seq.windows(2).any(|w| w[0] == w[1]);
        if !has_repeat || attempt == 999 {
            return Ok(seq);
        }
    }
    unreachable!()
}

fn build_schedules(cfg: &WorldConfig) -> Vec<AgentSchedule> {
    let h = cfg.horizon_s;
    let dwell_min = cfg.dwell_min_frac * h;
    let dwell_max = cfg.dwell_max_frac * h;
    (0..cfg.agents)
        .map(|agent| {
            let mut srng = keyed_rng(cfg.seed, rng::domain::SCHEDULE, agent as u64, 0, 0);
            let mut segments = Vec::new();
            let mut t = 0.0;
            let mut zone = srng.gen_range(0..cfg.zones);
            while t < h {
                segments.push((t, zone));
                t += srng.gen_range(dwell_min..=dwell_max);
                if cfg.zones > 1 {
                    let step = srng.gen_range(1..cfg.zones);
                    zone = (zone + step) % cfg.zones;
                }
            }
            // Staggered on/off duty cycle; the first on-period has a random
            // remaining length so the fleet's gaps do not align.
            let mut off = Vec::new();
            if cfg.duty_off_max_frac > 0.0 {
                let on_min = cfg.duty_on_min_frac * h;
                let on_max = cfg.duty_on_max_frac * h;
                let off_min = cfg.duty_off_min_frac * h;
                let off_max = cfg.duty_off_max_frac * h;
                let mut t = srng.gen_range(0.0..=on_max);
                while t < h {
                    let gap = srng.gen_range(off_min..=off_max);
                    off.push((t, (t + gap).min(h)));
                    t += gap + srng.gen_range(on_min..=on_max);
                }
            }
            AgentSchedule {
                agent,
                start: 0.0,
                end: h,
                segments,
                off,
            }
        })
        .collect()
}

impl WorldState {
    pub fn horizon(&self) -> f64 {
        self.cfg.horizon_s
    }

    /// Weather at time `t`; linear interpolation over the transition window
    /// at each period boundary, daylight from the sun-altitude threshold.
    pub fn weather_at(&self, t: f64) -> Result<WeatherState> {
        if !(0.0..=self.cfg.horizon_s).contains(&t) {
            return Err(Error::contract(format!(
                "time {t} outside the horizon [0, {}]",
                self.cfg.horizon_s
            )));
        }
        let sun = sun_altitude(&self.cfg, t);
        let mut weights = [0.0; 3];
        match self.cfg.weather_mode {
            WeatherMode::Static => weights[WeatherKind::Clear.index()] = 1.0,
            WeatherMode::Dynamic => {
                let period = self.cfg.weather_period();
                let trans = self.cfg.transition_len();
                let i = ((t / period) as usize).min(self.weather_periods.len() - 1);
                let cur = self.weather_periods[i];
                let offset = t - i as f64 * period;
                if i > 0 && offset < trans {
                    let prev = self.weather_periods[i - 1];
                    let w = offset / trans;
                    weights[prev.index()] += 1.0 - w;
                    weights[cur.index()] += w;
                } else {
                    weights[cur.index()] = 1.0;
                }
            }
        }
        Ok(WeatherState {
            weights,
            sun_altitude_deg: sun,
        })
    }

    pub fn is_active(&self, agent: AgentId, t: f64) -> bool {
        self.schedules[agent].is_on(t)
    }

    /// Piecewise-constant zone lookup, right-continuous at transitions.
    pub fn zone_of(&self, agent: AgentId, t: f64) -> Result<ZoneId> {
        self.schedules
            .get(agent)
            .and_then(|s| s.zone_at(t))
            .ok_or_else(|| Error::contract(format!("agent {agent} inactive at t={t}")))
    }

    /// Synthesize the sample observed by `agent` at `t`, or `None` when the
    /// agent is inactive. Pure in (seed, agent, t, pixel index).
    pub fn sample_at(&self, agent: AgentId, t: f64) -> Result<Option<Sample>> {
        if agent >= self.cfg.agents {
            return Err(Error::contract(format!("unknown agent {agent}")));
        }
        if !self.is_active(agent, t) {
            return Ok(None);
        }
        let zone = self.zone_of(agent, t)?;
        let weather = self.weather_at(t)?;
        let daylight = weather.daylight().index();
        let d = self.cfg.feature_dim;
        let p = self.cfg.pixels;

        // Content can blend into the next zone just before a scheduled change.
        let blend = self.cfg.boundary_blend_s;
        let next = if blend > 0.0 {
            self.schedules[agent].next_change_after(t).and_then(|(ts, nz)| {
                let gap = ts - t;
                if gap < blend {
                    Some((nz, 1.0 - gap / blend))
                } else {
                    None
                }
            })
        } else {
            None
        };

        let tkey = time_key(t);
        let mut features = Vec::with_capacity(p * d);
        let mut truth = Vec::with_capacity(p);
        for pixel in 0..p {
            let mut prng = keyed_rng(self.cfg.seed, rng::domain::SAMPLE, agent as u64, tkey, pixel as u64);
            let content_zone = match next {
                Some((nz, w)) if prng.gen_range(0.0..1.0f64) < w => nz,
                _ => zone,
            };
            let label = draw_class(&mut prng, &self.priors[content_zone]);
            let proto = &self.prototypes[content_zone][label];
            for i in 0..d {
                let mut x = proto[i];
                for kind in 0..3 {
                    let w = weather.weights[kind];
                    if w > 0.0 {
                        x += w * self.shifts[kind][daylight][i];
                    }
                }
                x += self.cfg.noise_sigma * prng.sample::<f64, _>(StandardNormal);
                features.push(x);
            }
            truth.push(label);
        }
        Ok(Some(Sample {
            agent,
            time: Timestamp(t),
            pixels: p,
            dim: d,
            features,
            truth,
        }))
    }
}

fn draw_class(rng: &mut impl Rng, priors: &[f64]) -> ClassId {
    let u: f64 = rng.gen_range(0.0..1.0);
    let mut acc = 0.0;
    for (c, &p) in priors.iter().enumerate() {
        acc += p;
        if u < acc {
            return c;
        }
    }
    priors.len() - 1
}
