//! Synthetic problem instances: Haar and incoherence-controlled factors, Gaussian noise, staggered masks.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::singular_values;
use crate::panel::{PanelObservation, StaggeredPattern};

/// Stream reserved for the truth when it is frozen across trials.
const FROZEN_TRUTH_STREAM: u64 = 1 << 63;

/// A generator seeded by `seed` on an independent stream.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Incoherence target for one factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Level {
    Value(f64),
    Named(NamedLevel),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NamedLevel {
    /// Plain Haar factor with no incoherence control.
    #[serde(rename = "haar")]
    Haar,
    /// `r^{1/4}`, resolved against the configured rank.
    #[serde(rename = "r^1/4")]
    RootRank,
}

impl Level {
    pub const HAAR: Level = Level::Named(NamedLevel::Haar);
    pub const ROOT_RANK: Level = Level::Named(NamedLevel::RootRank);

    /// Numeric level for rank `r`, or `None` for Haar.
    pub fn resolve(self, r: usize) -> Option<f64> {
        match self {
            Level::Value(v) => Some(v),
            Level::Named(NamedLevel::Haar) => None,
            Level::Named(NamedLevel::RootRank) => Some((r as f64).powf(0.25)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Case {
    /// `U*(μ)` with a Haar `V*`.
    Case1,
    /// `U*(μ)` and `V*(ν)`, with `ν = μ` unless given.
    Case2,
    /// Each factor follows its own level.
    Custom,
}

/// Flat, serializable description of a synthetic experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub n: usize,
    pub t: usize,
    pub r: usize,
    pub mu: Level,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nu: Option<Level>,
    pub omega: f64,
    pub groups: Vec<usize>,
    pub stages: Vec<usize>,
    pub seed: u64,
    pub case: Case,
    /// Draw the truth once and reuse it in every trial.
    #[serde(default)]
    pub freeze_truth: bool,
}

impl EnsembleConfig {
    /// The 500 x 500, rank-3, three-group layout with groups and stages 200/200/100.
    pub fn reference(case: Case, mu: f64) -> Self {
        EnsembleConfig {
            n: 500,
            t: 500,
            r: 3,
            mu: Level::Value(mu),
            nu: None,
            omega: 1.0,
            groups: vec![200, 200, 100],
            stages: vec![200, 200, 100],
            seed: 20_240_101,
            case,
            freeze_truth: false,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: EnsembleConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let pointer = json_pointer(&e.path().to_string());
            Error::config(pointer, e.inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    fn nu_level(&self) -> Level {
        match (self.case, self.nu) {
            (Case::Case1, _) => Level::HAAR,
            (Case::Case2, None) => self.mu,
            (_, Some(nu)) => nu,
            (Case::Custom, None) => Level::HAAR,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::config("/n", "must be positive"));
        }
        if self.t == 0 {
            return Err(Error::config("/t", "must be positive"));
        }
        if self.r == 0 || self.r > self.n.min(self.t) {
            return Err(Error::config(
                "/r",
                format!("must lie in 1..={}", self.n.min(self.t)),
            ));
        }
        if !(self.omega >= 0.0 && self.omega.is_finite()) {
            return Err(Error::config("/omega", "must be finite and non-negative"));
        }
        if self.groups.is_empty() {
            return Err(Error::config("/groups", "needs at least one group"));
        }
        if self.groups.len() != self.stages.len() {
            return Err(Error::config(
                "/stages",
                format!(
                    "{} stages for {} groups",
                    self.stages.len(),
                    self.groups.len()
                ),
            ));
        }
        for (name, list, total) in [
            ("groups", &self.groups, self.n),
            ("stages", &self.stages, self.t),
        ] {
            if let Some(i) = list.iter().position(|&x| x == 0) {
                return Err(Error::config(format!("/{name}/{i}"), "must be positive"));
            }
            if list.iter().sum::<usize>() != total {
                return Err(Error::config(
                    format!("/{name}"),
                    format!("must sum to {total}"),
                ));
            }
        }
        check_level("/mu", self.mu, self.n, self.r)?;
        check_level("/nu", self.nu_level(), self.t, self.r)?;
        Ok(())
    }

    pub fn pattern(&self) -> Result<StaggeredPattern> {
        StaggeredPattern::from_sizes(self.groups.clone(), self.stages.clone())
    }
}

fn check_level(pointer: &str, level: Level, n: usize, r: usize) -> Result<()> {
    if let Some(v) = level.resolve(r) {
        let max = (n as f64 / r as f64).sqrt();
        if !(v > 0.0 && v < max) {
            return Err(Error::config(
                pointer,
                format!("level {v} outside (0, {max})"),
            ));
        }
    }
    Ok(())
}

fn json_pointer(path: &str) -> String {
    if path == "." || path.is_empty() {
        return String::new();
    }
    let mut out = String::new();
    for part in path.split('.') {
        let mut rest = part;
        while let Some(open) = rest.find('[') {
            if open > 0 {
                out.push('/');
                out.push_str(&rest[..open]);
            }
            let close = rest[open..].find(']').map_or(rest.len(), |c| open + c);
            out.push('/');
            out.push_str(&rest[open + 1..close]);
            rest = &rest[(close + 1).min(rest.len())..];
        }
        if !rest.is_empty() {
            out.push('/');
            out.push_str(rest);
        }
    }
    out
}

/// Column-orthonormal `n x r` matrix drawn from the Haar measure.
pub fn haar_orthonormal(n: usize, r: usize, seed: u64) -> Result<DMatrix<f64>> {
    haar_with(&mut ChaCha8Rng::seed_from_u64(seed), n, r)
}

/// QR of a Gaussian matrix with the signs of `diag(R)` absorbed into `Q`.
pub fn haar_with<R: Rng + ?Sized>(rng: &mut R, n: usize, r: usize) -> Result<DMatrix<f64>> {
    if r > n {
        return Err(Error::RankTooLarge { rank: r, max: n });
    }
    if r == 0 {
        return Err(Error::ZeroRank);
    }
    let g = DMatrix::from_fn(n, r, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let diag = qr.r().diagonal();
    for j in 0..r {
        if diag[j] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Ok(q)
}

/// `[√(1 − level²r/n)·U⁻ ; level·√(r/n)·O]` with `U⁻` Haar `(n−r) x r` and `O` Haar `r x r`.
pub fn incoherent_factor(n: usize, r: usize, level: f64, seed: u64) -> Result<DMatrix<f64>> {
    incoherent_with(&mut ChaCha8Rng::seed_from_u64(seed), n, r, level)
}

pub fn incoherent_with<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    r: usize,
    level: f64,
) -> Result<DMatrix<f64>> {
    if r == 0 {
        return Err(Error::ZeroRank);
    }
    if r >= n {
        return Err(Error::RankTooLarge {
            rank: r,
            max: n.saturating_sub(1),
        });
    }
    let max = (n as f64 / r as f64).sqrt();
    if !(level > 0.0 && level < max) {
        return Err(Error::LevelOutOfRange { level, max });
    }
    let share = level * level * r as f64 / n as f64;
    let top = haar_with(rng, n - r, r)? * (1.0 - share).sqrt();
    let bottom = haar_with(rng, r, r)? * share.sqrt();
    let mut out = DMatrix::zeros(n, r);
    out.view_mut((0, 0), (n - r, r)).copy_from(&top);
    out.view_mut((n - r, 0), (r, r)).copy_from(&bottom);
    Ok(out)
}

/// Ground truth `M* = U* V*ᵀ` with its factors and singular values.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub m_star: DMatrix<f64>,
    pub u_star: DMatrix<f64>,
    pub v_star: DMatrix<f64>,
    pub sigma_star: DVector<f64>,
}

impl Truth {
    pub fn from_factors(u_star: DMatrix<f64>, v_star: DMatrix<f64>) -> Result<Self> {
        let r = u_star.ncols();
        if v_star.ncols() != r {
            return Err(Error::DimensionMismatch(format!(
                "factors have {} and {} columns",
                r,
                v_star.ncols()
            )));
        }
        let m_star = &u_star * v_star.transpose();
        // σ(U Vᵀ) = σ(R_U R_Vᵀ) for thin QRs U = Q_U R_U, V = Q_V R_V.
        let core = u_star.clone().qr().r() * v_star.clone().qr().r().transpose();
        let sigma_star = singular_values(&core)?;
        if sigma_star[r - 1] <= 1e-10 * sigma_star[0] {
            return Err(Error::RankMismatch {
                expected: r,
                detail: format!("σ_r = {:e}", sigma_star[r - 1]),
            });
        }
        Ok(Truth {
            m_star,
            u_star,
            v_star,
            sigma_star,
        })
    }
}

fn factor_with<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    r: usize,
    level: Level,
) -> Result<DMatrix<f64>> {
    match level.resolve(r) {
        None => haar_with(rng, n, r),
        Some(v) => incoherent_with(rng, n, r, v),
    }
}

/// Draws the truth for `cfg` from `rng`.
pub fn build_truth_with<R: Rng + ?Sized>(cfg: &EnsembleConfig, rng: &mut R) -> Result<Truth> {
    let u = factor_with(rng, cfg.n, cfg.r, cfg.mu)?;
    let v = factor_with(rng, cfg.t, cfg.r, cfg.nu_level())?;
    Truth::from_factors(u, v)
}

/// Truth for trial 0 of `cfg`.
pub fn build_truth(cfg: &EnsembleConfig) -> Result<Truth> {
    cfg.validate()?;
    truth_for_trial(cfg, 0)
}

fn truth_for_trial(cfg: &EnsembleConfig, trial: u64) -> Result<Truth> {
    let stream = if cfg.freeze_truth {
        FROZEN_TRUTH_STREAM
    } else {
        2 * trial
    };
    build_truth_with(cfg, &mut stream_rng(cfg.seed, stream))
}

/// I.i.d. `N(0, ω²/(NT))` entries.
pub fn gaussian_noise(n: usize, t: usize, omega: f64, seed: u64) -> DMatrix<f64> {
    noise_with(&mut ChaCha8Rng::seed_from_u64(seed), n, t, omega)
}

pub fn noise_with<R: Rng + ?Sized>(rng: &mut R, n: usize, t: usize, omega: f64) -> DMatrix<f64> {
    if omega == 0.0 {
        return DMatrix::zeros(n, t);
    }
    let sd = omega / ((n * t) as f64).sqrt();
    DMatrix::from_fn(n, t, |_, _| sd * rng.sample::<f64, _>(StandardNormal))
}

/// One trial: truth on stream `2·trial`, noise on stream `2·trial + 1`.
pub fn simulate_trial(cfg: &EnsembleConfig, trial: u64) -> Result<(PanelObservation, Truth)> {
    let truth = truth_for_trial(cfg, trial)?;
    let noise = noise_with(
        &mut stream_rng(cfg.seed, 2 * trial + 1),
        cfg.n,
        cfg.t,
        cfg.omega,
    );
    let pattern = cfg.pattern()?;
    let panel = PanelObservation::new(&truth.m_star + noise, pattern.sorted_mask())?;
    Ok((panel, truth))
}

/// `mask ⊙ (M* + E)` for trial 0, with the truth kept for evaluation.
pub fn simulate_panel(cfg: &EnsembleConfig) -> Result<(PanelObservation, Truth)> {
    cfg.validate()?;
    simulate_trial(cfg, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::local_incoherence;

    fn orthonormality_error(u: &DMatrix<f64>) -> f64 {
        (u.tr_mul(u) - DMatrix::identity(u.ncols(), u.ncols())).amax()
    }

    #[test]
    fn haar_square_is_orthogonal() {
        let q = haar_orthonormal(5, 5, 1).unwrap();
        assert!(orthonormality_error(&q) < 1e-12);
        assert!((&q * q.transpose() - DMatrix::identity(5, 5)).amax() < 1e-12);
        assert_eq!(
            haar_orthonormal(3, 4, 1),
            Err(Error::RankTooLarge { rank: 4, max: 3 })
        );
    }

    #[test]
    fn haar_is_deterministic() {
        assert_eq!(
            haar_orthonormal(50, 3, 9).unwrap(),
            haar_orthonormal(50, 3, 9).unwrap()
        );
    }

    #[test]
    fn haar_row_energy_matches_trace_identity() {
        let (n, r) = (1000, 3);
        let mean: f64 = (0..20)
            .map(|s| haar_orthonormal(n, r, s).unwrap().norm_squared() / n as f64)
            .sum::<f64>()
            / 20.0;
        assert!((mean - r as f64 / n as f64).abs() < 0.05 * 0.003);
        // Row energy is spread, not just the total: check a fixed row's average.
        let row0: f64 = (0..400)
            .map(|s| {
                haar_orthonormal(n, r, 1000 + s)
                    .unwrap()
                    .row(0)
                    .norm_squared()
            })
            .sum::<f64>()
            / 400.0;
        assert!((row0 / 0.003 - 1.0).abs() < 0.25);
    }

    #[test]
    fn incoherent_factor_hits_level() {
        let u = incoherent_factor(500, 3, 1.0, 4).unwrap();
        assert!(orthonormality_error(&u) < 1e-10);
        for i in 497..500 {
            assert!((local_incoherence(&u, i) - 1.0).abs() < 1e-10);
        }
        for level in [1e-4, 1e-2, 5.0, 12.0] {
            let u = incoherent_factor(500, 3, level, 5).unwrap();
            assert!(orthonormality_error(&u) < 1e-10);
            let worst = (497..500)
                .map(|i| (local_incoherence(&u, i) - level).abs())
                .fold(0.0, f64::max);
            assert!(worst < 1e-9);
        }
        let edge = (500.0f64 / 3.0).sqrt();
        assert!(matches!(
            incoherent_factor(500, 3, edge, 1),
            Err(Error::LevelOutOfRange { .. })
        ));
        assert!(incoherent_factor(500, 3, 0.0, 1).is_err());
    }

    #[test]
    fn truth_has_exact_rank_and_unit_spectrum() {
        for case in [Case::Case1, Case::Case2] {
            let mut cfg = EnsembleConfig::reference(case, 1.0);
            cfg.n = 60;
            cfg.t = 50;
            cfg.groups = vec![30, 20, 10];
            cfg.stages = vec![20, 20, 10];
            let truth = build_truth(&cfg).unwrap();
            let s = singular_values(&truth.m_star).unwrap();
            assert!(s[2] > 1e-10 && s[3] < 1e-10);
            for k in 0..3 {
                assert!((truth.sigma_star[k] - 1.0).abs() < 1e-12);
                assert!((s[k] - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn rank_one_outer_product_has_unit_singular_value() {
        let u = incoherent_factor(20, 1, 0.5, 1).unwrap();
        let v = incoherent_factor(15, 1, 0.5, 2).unwrap();
        let truth = Truth::from_factors(u, v).unwrap();
        let s = singular_values(&truth.m_star).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-12 && s[1] < 1e-12);
    }

    #[test]
    fn root_rank_level_resolves() {
        assert!((Level::ROOT_RANK.resolve(16).unwrap() - 2.0).abs() < 1e-15);
        assert_eq!(Level::HAAR.resolve(3), None);
    }

    #[test]
    fn noise_cases() {
        assert_eq!(gaussian_noise(4, 3, 0.0, 1), DMatrix::zeros(4, 3));
        assert_eq!(
            gaussian_noise(40, 30, 1.0, 2),
            gaussian_noise(40, 30, 1.0, 2)
        );
        let e = gaussian_noise(500, 500, 1.0, 3);
        let fro = e.norm();
        assert!((0.95..=1.05).contains(&fro));
        let var = e.norm_squared() / 250_000.0;
        assert!((var * 250_000.0 - 1.0).abs() < 0.05);
    }

    #[test]
    fn simulated_panel_follows_staircase_and_seed() {
        let mut cfg = EnsembleConfig::reference(Case::Case1, 1.0);
        cfg.omega = 0.0;
        let (panel, truth) = simulate_panel(&cfg).unwrap();
        let pattern = crate::panel::detect_pattern(&panel).unwrap();
        assert_eq!(pattern.group_sizes(), &[200, 200, 100]);
        assert_eq!(pattern.stage_lengths(), &[200, 200, 100]);
        for (i, t) in [(0, 499), (250, 399), (450, 199)] {
            assert_eq!(panel.value(i, t), Some(truth.m_star[(i, t)]));
        }
        assert!(!panel.is_observed(499, 499));
        let again = simulate_panel(&cfg).unwrap();
        assert_eq!(again.0, panel);
    }

    #[test]
    fn trials_resample_unless_frozen() {
        let mut cfg = EnsembleConfig::reference(Case::Case1, 1.0);
        let (_, a) = simulate_trial(&cfg, 0).unwrap();
        let (_, b) = simulate_trial(&cfg, 1).unwrap();
        assert_ne!(a.v_star, b.v_star);
        cfg.freeze_truth = true;
        let (pa, a) = simulate_trial(&cfg, 0).unwrap();
        let (pb, b) = simulate_trial(&cfg, 1).unwrap();
        assert_eq!(a, b);
        assert_ne!(pa, pb);
    }

    #[test]
    fn config_json_round_trip_and_pointers() {
        let cfg = EnsembleConfig::reference(Case::Case2, 0.01);
        assert_eq!(EnsembleConfig::from_json(&cfg.to_json()).unwrap(), cfg);

        let text = r#"{"n":10,"t":10,"r":2,"mu":"r^1/4","nu":"haar","omega":1,
            "groups":[5,5],"stages":[6,4],"seed":1,"case":"custom"}"#;
        let parsed = EnsembleConfig::from_json(text).unwrap();
        assert_eq!(parsed.mu, Level::ROOT_RANK);

        let bad_sum = text.replace("[5,5]", "[5,4]");
        assert_eq!(
            EnsembleConfig::from_json(&bad_sum).unwrap_err(),
            Error::config("/groups", "must sum to 10")
        );
        let bad_type = text.replace("[6,4]", "[6,\"x\"]");
        match EnsembleConfig::from_json(&bad_type).unwrap_err() {
            Error::InvalidConfig { pointer, .. } => assert_eq!(pointer, "/stages/1"),
            other => panic!("unexpected {other:?}"),
        }
        let bad_level = text.replace("\"r^1/4\"", "100");
        match EnsembleConfig::from_json(&bad_level).unwrap_err() {
            Error::InvalidConfig { pointer, .. } => assert_eq!(pointer, "/mu"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(EnsembleConfig::from_json(&text.replace("\"seed\"", "\"sed\"")).is_err());
    }
}
