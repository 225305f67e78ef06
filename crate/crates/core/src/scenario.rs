//! Operating scenarios: random training draws per operating category and
//! hourly lookups into a yearly load/PV profile.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::grid_model::NetworkModel;
use crate::{Error, Result};

pub const HOURS_PER_YEAR: usize = 8760;

/// Load multipliers and PV availability for one snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    /// Multiplier on each load's nominal demand, in network load order.
    pub load_scale: Vec<f64>,
    /// Available PV real power per inverter (p.u.), in network PV order.
    pub pv_avail: Vec<f64>,
    pub tag: String,
}

impl Scenario {
    /// Every load at `load` times nominal and every PV at `pv` times its DC rating.
    pub fn uniform(network: &NetworkModel, load: f64, pv: f64, tag: impl Into<String>) -> Self {
        Scenario {
            load_scale: vec![load; network.loads().len()],
            pv_avail: network.pvs().iter().map(|s| pv * s.spec.dc_rating).collect(),
            tag: tag.into(),
        }
    }

    pub fn validate(&self, network: &NetworkModel) -> Result<()> {
        if self.load_scale.len() != network.loads().len() {
            return Err(Error::Dimension {
                what: "scenario load multipliers",
                expected: network.loads().len(),
                got: self.load_scale.len(),
            });
        }
        if self.pv_avail.len() != network.pvs().len() {
            return Err(Error::Dimension {
                what: "scenario PV availability",
                expected: network.pvs().len(),
                got: self.pv_avail.len(),
            });
        }
        if let Some(s) = self.load_scale.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
            return Err(Error::Parameter(format!(
                "scenario `{}`: load multiplier {s} < 0",
                self.tag
            )));
        }
        for (p, pv) in self.pv_avail.iter().zip(network.pvs()) {
            if !(*p >= 0.0 && *p <= pv.spec.dc_rating * (1.0 + 1e-12)) {
                return Err(Error::Parameter(format!(
                    "scenario `{}`: PV availability {p} outside [0, {}] at bus {}",
                    self.tag, pv.spec.dc_rating, pv.spec.bus
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    /// High load, no PV.
    Evening,
    /// Low load, high PV.
    MiddayPeak,
    /// Moderate load and PV.
    Normal,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Evening, Category::MiddayPeak, Category::Normal];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Evening => "evening",
            Category::MiddayPeak => "midday_peak",
            Category::Normal => "normal",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::UnknownCategory(s.to_string()))
    }
}

/// Lowest PV availability (fraction of DC rating) that counts as midday peak.
pub const MIDDAY_MIN_PV: f64 = 0.8;

/// Closed interval `[lo, hi]` sampled uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.hi > self.lo {
            rng.random_range(self.lo..=self.hi)
        } else {
            self.lo
        }
    }
}

/// Sampling ranges of one category: load as a multiple of nominal, PV as a
/// fraction of DC rating.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryRanges {
    pub load: Range,
    pub pv: Range,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub evening: CategoryRanges,
    pub midday_peak: CategoryRanges,
    pub normal: CategoryRanges,
    /// Mixture weights in `[evening, midday_peak, normal]` order.
    pub weights: [f64; 3],
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            evening: CategoryRanges {
                load: Range::new(0.8, 1.0),
                pv: Range::new(0.0, 0.0),
            },
            midday_peak: CategoryRanges {
                load: Range::new(0.2, 0.5),
                pv: Range::new(0.8, 1.0),
            },
            normal: CategoryRanges {
                load: Range::new(0.4, 0.8),
                pv: Range::new(0.3, 0.7),
            },
            weights: [1.0 / 3.0; 3],
        }
    }
}

impl ScenarioConfig {
    pub fn ranges(&self, category: Category) -> &CategoryRanges {
        match category {
            Category::Evening => &self.evening,
            Category::MiddayPeak => &self.midday_peak,
            Category::Normal => &self.normal,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for c in Category::ALL {
            let r = self.ranges(c);
            let ok =
                r.load.lo >= 0.0 && r.load.hi >= r.load.lo && r.pv.lo >= 0.0 && r.pv.hi >= r.pv.lo && r.pv.hi <= 1.0;
            if !ok {
                return Err(Error::Parameter(format!(
                    "invalid sampling ranges for category {c}: {r:?}"
                )));
            }
        }
        if self.evening.pv.hi != 0.0 {
            return Err(Error::Parameter("evening scenarios have no PV production".into()));
        }
        if self.midday_peak.pv.lo < MIDDAY_MIN_PV {
            return Err(Error::Parameter(format!(
                "midday_peak PV must stay at or above {MIDDAY_MIN_PV} of DC rating"
            )));
        }
        if self.weights.iter().any(|w| w.is_nan() || *w < 0.0) || self.weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Parameter(format!("invalid category weights {:?}", self.weights)));
        }
        Ok(())
    }

    /// Draw a category from the mixture weights.
    pub fn sample_category(&self, rng: &mut impl Rng) -> Category {
        let total: f64 = self.weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        for (c, w) in Category::ALL.into_iter().zip(self.weights) {
            if u < w {
                return c;
            }
            u -= w;
        }
        Category::Normal
    }
}

/// Draw a training scenario of the given category. One feeder-level load
/// multiplier and one irradiance level are shared by all loads and PVs.
pub fn sample_training_scenario(
    network: &NetworkModel,
    config: &ScenarioConfig,
    category: Category,
    rng: &mut impl Rng,
) -> Scenario {
    let ranges = config.ranges(category);
    let load = ranges.load.sample(rng);
    let pv = ranges.pv.sample(rng);
    Scenario::uniform(network, load, pv, category.as_str())
}

/// Normalised hourly load and PV shapes for one year.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileSet {
    pub load: Vec<f64>,
    pub pv: Vec<f64>,
}

impl ProfileSet {
    pub fn new(load: Vec<f64>, pv: Vec<f64>) -> Result<Self> {
        for (name, v) in [("load", &load), ("pv", &pv)] {
            if v.len() != HOURS_PER_YEAR {
                return Err(Error::Profile(format!(
                    "{name} profile has {} rows, expected {HOURS_PER_YEAR}",
                    v.len()
                )));
            }
            if let Some((h, x)) = v.iter().enumerate().find(|(_, x)| !(0.0..=1.0).contains(*x)) {
                return Err(Error::Profile(format!("{name} value {x} at hour {h} outside [0, 1]")));
            }
        }
        Ok(ProfileSet { load, pv })
    }

    pub fn len(&self) -> usize {
        self.load.len()
    }

    pub fn is_empty(&self) -> bool {
        self.load.is_empty()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ProfileRow {
    hour: usize,
    load_norm: f64,
    pv_norm: f64,
}

/// Read a `hour,load_norm,pv_norm` CSV with a header row and 8760 data rows.
pub fn load_profiles(path: impl AsRef<Path>) -> Result<ProfileSet> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_profiles(file)
}

pub fn read_profiles(reader: impl std::io::Read) -> Result<ProfileSet> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut load = Vec::with_capacity(HOURS_PER_YEAR);
    let mut pv = Vec::with_capacity(HOURS_PER_YEAR);
    for (i, row) in rdr.deserialize::<ProfileRow>().enumerate() {
        let row = row.map_err(|e| Error::Profile(format!("row {}: {e}", i + 1)))?;
        if row.hour != i {
            return Err(Error::Profile(format!(
                "row {} has hour {}, expected {i}",
                i + 1,
                row.hour
            )));
        }
        load.push(row.load_norm);
        pv.push(row.pv_norm);
    }
    ProfileSet::new(load, pv)
}

pub fn write_profiles(profiles: &ProfileSet, mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "hour,load_norm,pv_norm")?;
    for (h, (l, p)) in profiles.load.iter().zip(&profiles.pv).enumerate() {
        writeln!(out, "{h},{l:.5},{p:.5}")?;
    }
    Ok(())
}

/// Scenario for hour `hour`: the load value scales every load uniformly, the
/// PV value scales every inverter's DC rating.
pub fn scenario_at(network: &NetworkModel, profiles: &ProfileSet, hour: usize) -> Result<Scenario> {
    if hour >= profiles.len() {
        return Err(Error::Profile(format!(
            "hour {hour} out of range 0..{}",
            profiles.len()
        )));
    }
    Ok(Scenario::uniform(
        network,
        profiles.load[hour],
        profiles.pv[hour],
        format!("hour-{hour}"),
    ))
}

/// A plausible synthetic year: double-peaked daily load with seasonal swing,
/// and clear-sky PV bells modulated by persistent daily cloudiness.
pub fn synthetic_year(seed: u64) -> ProfileSet {
    use std::f64::consts::PI;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.03).expect("valid sigma");
    let mut load = Vec::with_capacity(HOURS_PER_YEAR);
    let mut pv = Vec::with_capacity(HOURS_PER_YEAR);
    let mut clearness: f64 = 0.8;
    for day in 0..365 {
        // day 172 is the summer solstice
        let season = (2.0 * PI * (day as f64 - 172.0) / 365.0).cos();
        let weekend = matches!(day % 7, 5 | 6);
        // persistent weather: AR(1) on daily clearness
        clearness = (0.6 * clearness + 0.4 * rng.random_range(0.2..1.05)).clamp(0.15, 1.0);
        let daylight = 12.0 + 2.5 * season;
        let sunrise = 12.5 - daylight / 2.0;
        let peak_irr = 0.78 + 0.22 * season;
        for hour in 0..24 {
            let t = hour as f64 + 0.5;
            let morning = (-((t - 8.0) / 2.0).powi(2)).exp();
            let evening = (-((t - 19.0) / 2.5).powi(2)).exp();
            let base = 0.42 + 0.22 * morning + 0.38 * evening + 0.08 * season.max(0.0) * (evening + 0.5);
            let l = base * if weekend { 0.93 } else { 1.0 } * (1.0 + noise.sample(&mut rng));
            load.push(l);

            let x = (t - sunrise) / daylight;
            let p = if (0.0..=1.0).contains(&x) {
                let bell = (PI * x).sin().powf(1.3);
                let cloud = (clearness + 0.1 * noise.sample(&mut rng) / 0.03).clamp(0.05, 1.0);
                peak_irr * bell * cloud
            } else {
                0.0
            };
            pv.push(p);
        }
    }
    let lmax = load.iter().cloned().fold(0.0, f64::max);
    let load = load.into_iter().map(|l| (l / lmax).clamp(0.0, 1.0)).collect();
    let pv = pv.into_iter().map(|p: f64| p.clamp(0.0, 1.0)).collect();
    ProfileSet { load, pv }
}
