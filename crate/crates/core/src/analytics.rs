//! Two-alternative forced choice bookkeeping: preference ratios and
//! confidence intervals over vote tallies.

use crate::error::{Error, Result};

/// Normal quantile for a two-sided 95% interval.
pub const Z_95: f64 = 1.96;

/// Odds `p / (1 - p)` of choosing option A.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Preference {
    Ratio(f64),
    /// Every vote went one way (`p` is 0 or 1).
    Unbounded { favors_a: bool },
}

impl Preference {
    pub fn ratio(self) -> Option<f64> {
        match self {
            Preference::Ratio(r) => Some(r),
            Preference::Unbounded { .. } => None,
        }
    }
}

impl std::fmt::Display for Preference {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Preference::Ratio(r) => write!(f, "{r:.4}"),
            Preference::Unbounded { favors_a: true } => write!(f, "unbounded(A)"),
            Preference::Unbounded { favors_a: false } => write!(f, "unbounded(B)"),
        }
    }
}

pub fn preference(p: f64) -> Result<Preference> {
    if p == 0.0 || p == 1.0 {
        return Ok(Preference::Unbounded { favors_a: p == 1.0 });
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("preference fraction {p} outside (0, 1)")));
    }
    Ok(Preference::Ratio(p / (1.0 - p)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct VoteTally {
    pub prefer_a: u64,
    pub prefer_b: u64,
}

impl VoteTally {
    pub fn total(&self) -> u64 {
        self.prefer_a + self.prefer_b
    }
}

impl std::ops::Add for VoteTally {
    type Output = VoteTally;

    fn add(self, rhs: Self) -> Self {
        VoteTally { prefer_a: self.prefer_a + rhs.prefer_a, prefer_b: self.prefer_b + rhs.prefer_b }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IntervalMethod {
    /// Normal approximation around the sample fraction.
    #[default]
    Wald,
    Wilson,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TallySummary {
    pub fraction: f64,
    pub halfwidth: f64,
    /// Interval centre; equals `fraction` for the Wald interval.
    pub centre: f64,
    pub preference: Preference,
    pub n: u64,
}

pub fn tally_summary(t: &VoteTally, method: IntervalMethod) -> Result<TallySummary> {
    let n = t.total();
    if n == 0 {
        return Err(Error::Empty("tally has no votes".into()));
    }
    let nf = n as f64;
    let p = t.prefer_a as f64 / nf;
    let (centre, halfwidth) = match method {
        IntervalMethod::Wald => (p, Z_95 * (p * (1.0 - p) / nf).sqrt()),
        IntervalMethod::Wilson => {
            let z2 = Z_95 * Z_95;
            let denom = 1.0 + z2 / nf;
            let centre = (p + z2 / (2.0 * nf)) / denom;
            let half = Z_95 / denom * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
            (centre, half)
        }
    };
    // From the counts directly, so that e.g. 2:1 gives exactly 2.
    let preference = match (t.prefer_a, t.prefer_b) {
        (_, 0) => Preference::Unbounded { favors_a: true },
        (0, _) => Preference::Unbounded { favors_a: false },
        (a, b) => Preference::Ratio(a as f64 / b as f64),
    };
    Ok(TallySummary { fraction: p, halfwidth, centre, preference, n })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSummary {
    pub per_video: Vec<(String, TallySummary)>,
    /// Videos where option A won a strict majority.
    pub preferred_videos: usize,
    pub video_fraction: f64,
    /// All votes pooled.
    pub pooled: TallySummary,
}

pub fn dataset_summary(tallies: &[(String, VoteTally)], method: IntervalMethod) -> Result<DatasetSummary> {
    if tallies.is_empty() {
        return Err(Error::Empty("no tallies".into()));
    }
    let per_video = tallies
        .iter()
        .map(|(id, t)| Ok((id.clone(), tally_summary(t, method)?)))
        .collect::<Result<Vec<_>>>()?;
    let preferred_videos = tallies.iter().filter(|(_, t)| t.prefer_a > t.prefer_b).count();
    let pooled = tally_summary(&tallies.iter().fold(VoteTally::default(), |acc, (_, t)| acc + *t), method)?;
    Ok(DatasetSummary {
        preferred_videos,
        video_fraction: preferred_videos as f64 / tallies.len() as f64,
        per_video,
        pooled,
    })
}

/// Parses `video_id prefer_a prefer_b` lines (whitespace or comma separated).
/// Blank lines and `#` comments are skipped.
pub fn parse_tallies(text: &str) -> Result<Vec<(String, VoteTally)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()).collect();
        let bad = || Error::MalformedHeader(format!("line {}: expected 'video_id prefer_a prefer_b'", lineno + 1));
        if fields.len() != 3 {
            return Err(bad());
        }
        let a = fields[1].parse::<u64>().map_err(|_| bad())?;
        let b = fields[2].parse::<u64>().map_err(|_| bad())?;
        out.push((fields[0].to_string(), VoteTally { prefer_a: a, prefer_b: b }));
    }
    Ok(out)
}
