//! Seeded synthetic CAN traffic with flooding, fuzzy and malfunction
//! injections in periodic bursts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AttackClass, CanMessage, DataError, MAX_STANDARD_ID};
use crate::config::{parse_int, parse_value, ConfigError, KvConfig};

/// Generator for one payload byte of a periodic stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BytePattern {
    Constant(u8),
    /// `k mod modulus` for the k-th frame; modulus ≤ 64.
    Counter {
        modulus: u8,
    },
    /// Uniform in `base ± spread`; spread < 64.
    Noise {
        base: u8,
        spread: u8,
    },
}

impl BytePattern {
    fn sample<R: Rng>(&self, k: u64, rng: &mut R) -> u8 {
        match *self {
            BytePattern::Constant(c) => c,
            BytePattern::Counter { modulus } => (k % modulus as u64) as u8,
            BytePattern::Noise { base, spread } => {
                let lo = base.saturating_sub(spread);
                let hi = base.saturating_add(spread);
                rng.gen_range(lo..=hi)
            }
        }
    }

    /// A value this pattern never produces.
    fn anomalous(&self) -> u8 {
        match *self {
            BytePattern::Constant(c) => c ^ 0xFF,
            BytePattern::Counter { .. } => 0xFF,
            BytePattern::Noise { base, .. } => base ^ 0x80,
        }
    }

    fn random<R: Rng>(rng: &mut R) -> Self {
        match rng.gen_range(0..4) {
            0 | 1 => BytePattern::Constant(rng.gen()),
            2 => BytePattern::Counter {
                modulus: [4, 8, 16, 64][rng.gen_range(0..4)],
            },
            _ => BytePattern::Noise {
                base: rng.gen_range(32..224),
                spread: rng.gen_range(1..=8),
            },
        }
    }
}

/// One periodic identifier of a vehicle.
#[derive(Debug, Clone, PartialEq)]
pub struct IdStream {
    pub id: u32,
    pub period_s: f64,
    /// One pattern per payload byte; its length is the DLC.
    pub bytes: Vec<BytePattern>,
}

/// Periodic ECU traffic of a (synthetic) vehicle.
#[derive(Debug, Clone, PartialEq)]
pub struct VehicleProfile {
    pub streams: Vec<IdStream>,
    /// Seed for emission phases, jitter, noise bytes and injected frames.
    pub seed: u64,
}

const PROFILE_A_IDS: [u32; 16] = [
    0x0a0, 0x0a1, 0x0b0, 0x153, 0x164, 0x1f1, 0x220, 0x260, 0x2a0, 0x316, 0x329, 0x350, 0x370, 0x43f, 0x440, 0x545,
];
const PROFILE_A_PERIODS_MS: [f64; 16] = [
    10.0, 10.0, 10.0, 20.0, 20.0, 20.0, 20.0, 50.0, 50.0, 50.0, 100.0, 100.0, 100.0, 100.0, 200.0, 200.0,
];
const PROFILE_B_IDS: [u32; 18] = [
    0x018, 0x034, 0x042, 0x081, 0x110, 0x165, 0x18f, 0x1a0, 0x251, 0x2b0, 0x2c0, 0x381, 0x394, 0x4a2, 0x4f1, 0x587,
    0x5a0, 0x690,
];
const PROFILE_B_PERIODS_MS: [f64; 18] = [
    10.0, 10.0, 20.0, 20.0, 20.0, 25.0, 40.0, 50.0, 50.0, 100.0, 100.0, 100.0, 100.0, 200.0, 200.0, 500.0, 500.0,
    1000.0,
];

impl VehicleProfile {
    /// Builds streams for `ids` whose payload patterns are drawn from
    /// `vehicle_seed`.
    pub fn from_ids(ids: &[u32], periods_ms: &[f64], vehicle_seed: u64, seed: u64) -> Result<Self, DataError> {
        if ids.is_empty() {
            return Err(DataError::Config("vehicle profile has no identifiers".into()));
        }
        if ids.len() != periods_ms.len() {
            return Err(DataError::Config(format!(
                "{} identifiers but {} periods",
                ids.len(),
                periods_ms.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(vehicle_seed);
        let streams = ids
            .iter()
            .zip(periods_ms)
            .map(|(&id, &ms)| {
                let dlc = [8, 8, 8, 8, 6, 5, 4, 2][rng.gen_range(0..8)];
                IdStream {
                    id,
                    period_s: ms / 1000.0,
                    bytes: (0..dlc).map(|_| BytePattern::random(&mut rng)).collect(),
                }
            })
            .collect();
        let profile = Self { streams, seed };
        profile.validate()?;
        Ok(profile)
    }

    /// Built-in vehicle "A".
    pub fn profile_a(seed: u64) -> Self {
        Self::from_ids(&PROFILE_A_IDS, &PROFILE_A_PERIODS_MS, 0xA, seed).expect("valid built-in profile")
    }

    /// Built-in vehicle "B"; no identifier in common with "A".
    pub fn profile_b(seed: u64) -> Self {
        Self::from_ids(&PROFILE_B_IDS, &PROFILE_B_PERIODS_MS, 0xB, seed).expect("valid built-in profile")
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.streams.is_empty() {
            return Err(DataError::Config("vehicle profile has no identifiers".into()));
        }
        for s in &self.streams {
            if s.id > MAX_STANDARD_ID {
                return Err(DataError::Config(format!("profile id {:#x} is not an 11-bit id", s.id)));
            }
            if !(s.period_s.is_finite() && s.period_s > 0.0) {
                return Err(DataError::Config(format!("id {:#x} has non-positive period", s.id)));
            }
            if s.bytes.len() > 8 {
                return Err(DataError::Config(format!("id {:#x} has more than 8 bytes", s.id)));
            }
        }
        Ok(())
    }

    /// Normal frames per second.
    pub fn message_rate(&self) -> f64 {
        self.streams.iter().map(|s| 1.0 / s.period_s).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackKind {
    None,
    Flooding,
    Fuzzy,
    Malfunction,
}

impl AttackKind {
    pub fn class(self) -> AttackClass {
        match self {
            AttackKind::None => AttackClass::Normal,
            AttackKind::Flooding => AttackClass::Flooding,
            AttackKind::Fuzzy => AttackClass::Fuzzy,
            AttackKind::Malfunction => AttackClass::Malfunction,
        }
    }

    fn default_rate_hz(self) -> f64 {
        match self {
            AttackKind::None => 0.0,
            AttackKind::Flooding => 2000.0,
            AttackKind::Fuzzy => 1000.0,
            AttackKind::Malfunction => 500.0,
        }
    }
}

impl std::str::FromStr for AttackKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" | "normal" => Ok(AttackKind::None),
            "flooding" | "dos" => Ok(AttackKind::Flooding),
            "fuzzy" => Ok(AttackKind::Fuzzy),
            "malfunction" | "spoofing" => Ok(AttackKind::Malfunction),
            other => Err(format!("unknown attack `{other}`")),
        }
    }
}

/// Which attack to inject and when.
///
/// Bursts cover `[n·interval_s + offset_s, n·interval_s + offset_s + burst_s)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub rate_hz: f64,
    pub burst_s: f64,
    pub interval_s: f64,
    pub offset_s: f64,
    /// Spoofed identifier for malfunction; drawn from the profile if unset.
    pub target_id: Option<u32>,
}

impl AttackSpec {
    pub fn new(kind: AttackKind) -> Self {
        Self {
            kind,
            rate_hz: kind.default_rate_hz(),
            burst_s: 5.0,
            interval_s: 20.0,
            offset_s: 5.0,
            target_id: None,
        }
    }

    pub fn none() -> Self {
        Self::new(AttackKind::None)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.kind == AttackKind::None {
            return Ok(());
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.rate_hz) || !positive(self.burst_s) || !positive(self.interval_s) {
            return Err(DataError::Config(format!(
                "attack rate, burst and interval must be positive: {self:?}"
            )));
        }
        if !(self.offset_s.is_finite() && self.offset_s >= 0.0) {
            return Err(DataError::Config(format!("negative burst offset {}", self.offset_s)));
        }
        Ok(())
    }

    /// Burst intervals clipped to `[0, duration)`.
    pub fn bursts(&self, duration: f64) -> Vec<(f64, f64)> {
        if self.kind == AttackKind::None {
            return Vec::new();
        }
        let mut out = Vec::new();
        let mut n = 0u64;
        loop {
            let start = n as f64 * self.interval_s + self.offset_s;
            if start >= duration {
                break;
            }
            out.push((start, (start + self.burst_s).min(duration)));
            n += 1;
        }
        out
    }
}

fn micros(t: f64) -> f64 {
    (t * 1e6).round() / 1e6
}

/// Generates `duration` seconds of traffic. A pure function of its inputs.
pub fn generate_synthetic(
    profile: &VehicleProfile,
    duration: f64,
    attack: &AttackSpec,
) -> Result<Vec<CanMessage>, DataError> {
    profile.validate()?;
    attack.validate()?;
    if !(duration.is_finite() && duration > 0.0) {
        return Err(DataError::Config(format!("duration must be positive, got {duration}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(profile.seed);
    let mut frames: Vec<CanMessage> = Vec::new();
    let mut payload = Vec::with_capacity(8);

    for stream in &profile.streams {
        let phase = rng.gen_range(0.0..stream.period_s);
        let mut k = 0u64;
        loop {
            let jitter = rng.gen_range(-0.01..0.01) * stream.period_s;
            let t = micros((phase + k as f64 * stream.period_s + jitter).max(0.0));
            if t >= duration {
                break;
            }
            payload.clear();
            payload.extend(stream.bytes.iter().map(|b| b.sample(k, &mut rng)));
            frames.push(CanMessage::new(t, stream.id, &payload, AttackClass::Normal)?);
            k += 1;
        }
    }

    let class = attack.kind.class();
    let spoof = match attack.kind {
        AttackKind::Malfunction => {
            let stream = match attack.target_id {
                Some(id) => profile
                    .streams
                    .iter()
                    .find(|s| s.id == id)
                    .ok_or_else(|| DataError::Config(format!("malfunction target {id:#x} is not a profile id")))?,
                None => &profile.streams[rng.gen_range(0..profile.streams.len())],
            };
            Some((
                stream.id,
                stream.bytes.iter().map(BytePattern::anomalous).collect::<Vec<u8>>(),
            ))
        }
        _ => None,
    };
    for (start, end) in attack.bursts(duration) {
        let mut j = 0u64;
        loop {
            let t = micros(start + j as f64 / attack.rate_hz);
            if t >= end {
                break;
            }
            let frame = match attack.kind {
                AttackKind::None => unreachable!("no bursts without an attack"),
                AttackKind::Flooding => CanMessage::new(t, 0x000, &[0; 8], class)?,
                AttackKind::Fuzzy => {
                    let id = rng.gen_range(0..=MAX_STANDARD_ID);
                    let bytes: [u8; 8] = rng.gen();
                    CanMessage::new(t, id, &bytes, class)?
                }
                AttackKind::Malfunction => {
                    let (id, bytes) = spoof.as_ref().expect("spoof target chosen");
                    CanMessage::new(t, *id, bytes, class)?
                }
            };
            frames.push(frame);
            j += 1;
        }
    }

    // stable: equal timestamps keep normal-before-attack insertion order
    frames.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    Ok(frames)
}

/// Contents of a synthetic-capture config file.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub profile: VehicleProfile,
    pub attack: AttackSpec,
    pub duration: f64,
}

impl SynthConfig {
    pub const KEYS: [&'static str; 12] = [
        "profile",
        "ids",
        "periods_ms",
        "vehicle_seed",
        "seed",
        "attack",
        "rate_hz",
        "burst_s",
        "interval_s",
        "offset_s",
        "target_id",
        "duration_s",
    ];

    /// Reads a config; unset keys keep built-in profile A and default
    /// attack timing.
    pub fn from_kv(cfg: &KvConfig) -> Result<Self, DataError> {
        cfg.ensure_known(|k| Self::KEYS.contains(&k))?;
        let seed = cfg.parsed::<u64>("seed")?.unwrap_or(0);
        let ids = cfg
            .get("ids")
            .map(|v| {
                v.split(',')
                    .map(|s| {
                        parse_int(s).map(|x| x as u32).map_err(|message| ConfigError::Invalid {
                            key: "ids".into(),
                            message,
                        })
                    })
                    .collect::<Result<Vec<u32>, _>>()
            })
            .transpose()?;
        let profile = match ids {
            Some(ids) => {
                let periods = cfg
                    .list::<f64>("periods_ms")?
                    .ok_or_else(|| DataError::Config("`ids` requires `periods_ms`".into()))?;
                let vehicle_seed = cfg.parsed::<u64>("vehicle_seed")?.unwrap_or(0);
                VehicleProfile::from_ids(&ids, &periods, vehicle_seed, seed)?
            }
            None => match cfg.get("profile").unwrap_or("a") {
                "a" | "A" => VehicleProfile::profile_a(seed),
                "b" | "B" => VehicleProfile::profile_b(seed),
                other => return Err(DataError::Config(format!("unknown built-in profile `{other}`"))),
            },
        };
        let kind = match cfg.get("attack") {
            Some(v) => parse_value::<AttackKind>("attack", v)?,
            None => AttackKind::None,
        };
        let mut attack = AttackSpec::new(kind);
        if let Some(v) = cfg.parsed("rate_hz")? {
            attack.rate_hz = v;
        }
        if let Some(v) = cfg.parsed("burst_s")? {
            attack.burst_s = v;
        }
        if let Some(v) = cfg.parsed("interval_s")? {
            attack.interval_s = v;
        }
        if let Some(v) = cfg.parsed("offset_s")? {
            attack.offset_s = v;
        }
        if let Some(v) = cfg.get("target_id") {
            attack.target_id = Some(parse_int(v).map_err(|message| ConfigError::Invalid {
                key: "target_id".into(),
                message,
            })? as u32);
        }
        attack.validate()?;
        let duration = cfg.parsed::<f64>("duration_s")?.unwrap_or(60.0);
        Ok(Self {
            profile,
            attack,
            duration,
        })
    }

    pub fn generate(&self) -> Result<Vec<CanMessage>, DataError> {
        generate_synthetic(&self.profile, self.duration, &self.attack)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Flag;

    #[test]
    fn single_id_rate_times_duration() {
        let p = VehicleProfile::from_ids(&[0x100], &[10.0], 1, 2).unwrap();
        let msgs = generate_synthetic(&p, 10.0, &AttackSpec::none()).unwrap();
        assert!((995..=1001).contains(&msgs.len()), "{}", msgs.len());
        assert!(msgs.iter().all(|m| m.flag() == Flag::Normal));
    }

    #[test]
    fn flooding_burst_count_and_signature() {
        let p = VehicleProfile::profile_a(3);
        let msgs = generate_synthetic(&p, 20.0, &AttackSpec::new(AttackKind::Flooding)).unwrap();
        let attacks: Vec<_> = msgs.iter().filter(|m| m.flag() == Flag::Attack).collect();
        assert_eq!(attacks.len(), 10_000);
        assert!(attacks.iter().all(|m| m.can_id == 0 && m.payload() == [0; 8]));
        assert!(attacks.iter().all(|m| (5.0..10.0).contains(&m.timestamp)));
        // interleaved with normal traffic, timestamps ordered
        assert!(msgs.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
        assert!(msgs
            .iter()
            .any(|m| m.flag() == Flag::Normal && (5.0..10.0).contains(&m.timestamp)));
    }

    #[test]
    fn same_seed_same_output() {
        let spec = AttackSpec::new(AttackKind::Fuzzy);
        let a = generate_synthetic(&VehicleProfile::profile_a(9), 30.0, &spec).unwrap();
        let b = generate_synthetic(&VehicleProfile::profile_a(9), 30.0, &spec).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&VehicleProfile::profile_a(10), 30.0, &spec).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn malfunction_spoofs_valid_id_with_unseen_payload() {
        let p = VehicleProfile::profile_a(4);
        let spec = AttackSpec {
            target_id: Some(0x316),
            ..AttackSpec::new(AttackKind::Malfunction)
        };
        let msgs = generate_synthetic(&p, 25.0, &spec).unwrap();
        let spoofed: Vec<_> = msgs.iter().filter(|m| m.flag() == Flag::Attack).collect();
        assert_eq!(spoofed.len(), 2500);
        assert!(spoofed.iter().all(|m| m.can_id == 0x316));
        let payload = spoofed[0].payload().to_vec();
        assert!(msgs
            .iter()
            .filter(|m| m.can_id == 0x316 && m.flag() == Flag::Normal)
            .all(|m| m.payload() != payload.as_slice()));
    }

    #[test]
    fn fuzzy_ids_stay_standard() {
        let msgs =
            generate_synthetic(&VehicleProfile::profile_b(1), 12.0, &AttackSpec::new(AttackKind::Fuzzy)).unwrap();
        let fuzzy: Vec<_> = msgs.iter().filter(|m| m.attack_class() == AttackClass::Fuzzy).collect();
        assert_eq!(fuzzy.len(), 5000);
        assert!(fuzzy.iter().all(|m| m.can_id <= MAX_STANDARD_ID && m.dlc() == 8));
    }

    #[test]
    fn profiles_share_no_ids() {
        let a = VehicleProfile::profile_a(0);
        let b = VehicleProfile::profile_b(0);
        assert!(a.streams.iter().all(|s| b.streams.iter().all(|t| t.id != s.id)));
    }

    #[test]
    fn configuration_errors() {
        assert!(VehicleProfile::from_ids(&[], &[], 0, 0).is_err());
        assert!(VehicleProfile::from_ids(&[1], &[0.0], 0, 0).is_err());
        let p = VehicleProfile::profile_a(0);
        let bad = AttackSpec {
            rate_hz: 0.0,
            ..AttackSpec::new(AttackKind::Flooding)
        };
        assert!(generate_synthetic(&p, 10.0, &bad).is_err());
        assert!(generate_synthetic(&p, 0.0, &AttackSpec::none()).is_err());
    }

    #[test]
    fn config_file_keys() {
        let kv = KvConfig::parse(
            "ids = 0x100, 0x200\nperiods_ms = 10, 20\nattack = flooding\nrate_hz = 100\nburst_s = 1\ninterval_s = 4\nseed = 5\nduration_s = 8\n",
        )
        .unwrap();
        let cfg = SynthConfig::from_kv(&kv).unwrap();
        assert_eq!(cfg.profile.streams.len(), 2);
        assert_eq!(cfg.attack.kind, AttackKind::Flooding);
        assert_eq!(cfg.attack.bursts(cfg.duration), vec![(5.0, 6.0)]);
        assert!(SynthConfig::from_kv(&KvConfig::parse("colour = red").unwrap()).is_err());
    }
}
