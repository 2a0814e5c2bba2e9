//! The fixed two-level sentence-function label set.
//!
//! Four coarse functions (level 1) are subdivided into twenty fine-grained
//! functions (level 2). Integer codes follow the published table order and
//! are part of the model file format, so they must never be reordered.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TaxonomyError {
    #[error("unknown sentence-function label `{0}`")]
    UnknownLabel(String),
    #[error("label code {0} is out of range")]
    BadCode(usize),
}

/// Coarse sentence function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Level1 {
    Declarative,
    Interrogative,
    Imperative,
    Exclamatory,
}

impl Level1 {
    pub const COUNT: usize = 4;
    pub const ALL: [Level1; 4] = [
        Level1::Declarative,
        Level1::Interrogative,
        Level1::Imperative,
        Level1::Exclamatory,
    ];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Result<Self, TaxonomyError> {
        Self::ALL.get(code).copied().ok_or(TaxonomyError::BadCode(code))
    }

    /// Two-letter wire abbreviation (`DE`, `IN`, `IM`, `EX`).
    pub fn abbrev(self) -> &'static str {
        match self {
            Level1::Declarative => "DE",
            Level1::Interrogative => "IN",
            Level1::Imperative => "IM",
            Level1::Exclamatory => "EX",
        }
    }

    pub fn full_name(self) -> &'static str {
        match self {
            Level1::Declarative => "Declarative",
            Level1::Interrogative => "Interrogative",
            Level1::Imperative => "Imperative",
            Level1::Exclamatory => "Exclamatory",
        }
    }

    pub fn chinese_name(self) -> &'static str {
        match self {
            Level1::Declarative => "陈述句",
            Level1::Interrogative => "疑问句",
            Level1::Imperative => "祈使句",
            Level1::Exclamatory => "感叹句",
        }
    }

    /// Level-2 labels belonging to this group, in code order.
    pub fn children(self) -> impl Iterator<Item = Level2> {
        Level2::ALL.into_iter().filter(move |l2| l2.level1() == self)
    }
}

impl fmt::Display for Level1 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.abbrev())
    }
}

impl FromStr for Level1 {
    type Err = TaxonomyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        Level1::ALL
            .into_iter()
            .find(|l1| t.eq_ignore_ascii_case(l1.abbrev()) || t.eq_ignore_ascii_case(l1.full_name()))
            .ok_or_else(|| TaxonomyError::UnknownLabel(s.to_string()))
    }
}

/// Fine-grained sentence function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Level2 {
    PositiveDe,
    NegativeDe,
    DeWithInWords,
    DoubleNegativeDe,
    OtherDe,
    WhStyleIn,
    YesNoIn,
    ANotAIn,
    AlternativeIn,
    InWithTagQuestion,
    Rhetorical,
    InWithBackchannel,
    InWithOpenQuestion,
    ImWithRequest,
    ImWithDissuade,
    ImWithCommand,
    ImWithForbidden,
    ExWithoutToneWords,
    ExWithInterjections,
    ExWithGreetings,
}

struct Level2Info {
    name: &'static str,
    chinese: &'static str,
    aliases: &'static [&'static str],
}

const LEVEL2_INFO: [Level2Info; 20] = [
    Level2Info { name: "Positive DE", chinese: "肯定陈述", aliases: &["positive declarative"] },
    Level2Info { name: "Negative DE", chinese: "否定陈述", aliases: &["negative declarative"] },
    Level2Info { name: "DE with IN words", chinese: "带疑问词的陈述", aliases: &["declarative with interrogative words"] },
    Level2Info { name: "Double-negative DE", chinese: "双重否定", aliases: &["double negative de", "double negation"] },
    Level2Info { name: "Other types of DE", chinese: "其他陈述", aliases: &["other de", "other declarative"] },
    Level2Info { name: "Wh-style IN", chinese: "特指问", aliases: &["wh in", "wh-interrogative", "wh-style interrogative"] },
    Level2Info { name: "Yes-no IN", chinese: "是非问", aliases: &["yes/no in", "yes-no interrogative"] },
    Level2Info { name: "A-not-A IN", chinese: "正反问", aliases: &["a-not-a interrogative"] },
    Level2Info { name: "Alternative IN", chinese: "选择问", aliases: &["alternative interrogative"] },
    Level2Info { name: "IN with tag question", chinese: "附加问", aliases: &["tag question"] },
    Level2Info { name: "Rhetorical", chinese: "反问", aliases: &["rhetorical in"] },
    Level2Info { name: "IN with backchannel", chinese: "回声问", aliases: &["backchannel"] },
    Level2Info { name: "IN with open question", chinese: "开放问", aliases: &["open question"] },
    Level2Info { name: "IM with request", chinese: "请求", aliases: &["request"] },
    Level2Info { name: "IM with dissuade", chinese: "劝阻", aliases: &["dissuade"] },
    Level2Info { name: "IM with command", chinese: "命令", aliases: &["command"] },
    Level2Info { name: "IM with forbidden", chinese: "禁止", aliases: &["forbidden"] },
    Level2Info { name: "EX without tone words", chinese: "无语气词感叹", aliases: &["ex without tone particles"] },
    Level2Info { name: "EX with interjections", chinese: "带叹词感叹", aliases: &["interjections"] },
    Level2Info { name: "EX with greetings", chinese: "问候祝愿", aliases: &["greetings"] },
];

impl Level2 {
    pub const COUNT: usize = 20;
    pub const ALL: [Level2; 20] = [
        Level2::PositiveDe,
        Level2::NegativeDe,
        Level2::DeWithInWords,
        Level2::DoubleNegativeDe,
        Level2::OtherDe,
        Level2::WhStyleIn,
        Level2::YesNoIn,
        Level2::ANotAIn,
        Level2::AlternativeIn,
        Level2::InWithTagQuestion,
        Level2::Rhetorical,
        Level2::InWithBackchannel,
        Level2::InWithOpenQuestion,
        Level2::ImWithRequest,
        Level2::ImWithDissuade,
        Level2::ImWithCommand,
        Level2::ImWithForbidden,
        Level2::ExWithoutToneWords,
        Level2::ExWithInterjections,
        Level2::ExWithGreetings,
    ];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Result<Self, TaxonomyError> {
        Self::ALL.get(code).copied().ok_or(TaxonomyError::BadCode(code))
    }

    pub fn level1(self) -> Level1 {
        level1_of(self)
    }

    /// Canonical English name, the second half of the wire form.
    pub fn name(self) -> &'static str {
        LEVEL2_INFO[self.code()].name
    }

    pub fn chinese_name(self) -> &'static str {
        LEVEL2_INFO[self.code()].chinese
    }

    fn matches_name(self, candidate: &str) -> bool {
        let info = &LEVEL2_INFO[self.code()];
        candidate == info.name
            || candidate.eq_ignore_ascii_case(info.name)
            || info.aliases.iter().any(|a| candidate.eq_ignore_ascii_case(a))
    }
}

impl fmt::Display for Level2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parent group of a level-2 label.
pub fn level1_of(l2: Level2) -> Level1 {
    use Level2::*;
    match l2 {
        PositiveDe | NegativeDe | DeWithInWords | DoubleNegativeDe | OtherDe => Level1::Declarative,
        WhStyleIn | YesNoIn | ANotAIn | AlternativeIn | InWithTagQuestion | Rhetorical
        | InWithBackchannel | InWithOpenQuestion => Level1::Interrogative,
        ImWithRequest | ImWithDissuade | ImWithCommand | ImWithForbidden => Level1::Imperative,
        ExWithoutToneWords | ExWithInterjections | ExWithGreetings => Level1::Exclamatory,
    }
}

/// A (level-1, level-2) pair. The level-1 half is always the parent of the
/// level-2 half; construction goes through [`SentenceFunction::new`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SentenceFunction {
    level2: Level2,
}

impl SentenceFunction {
    pub fn new(level2: Level2) -> Self {
        Self { level2 }
    }

    pub fn level1(self) -> Level1 {
        self.level2.level1()
    }

    pub fn level2(self) -> Level2 {
        self.level2
    }

    pub fn all() -> impl Iterator<Item = SentenceFunction> {
        Level2::ALL.into_iter().map(SentenceFunction::new)
    }
}

impl From<Level2> for SentenceFunction {
    fn from(l2: Level2) -> Self {
        Self::new(l2)
    }
}

/// Wire form `L1:L2`, e.g. `IN:Yes-no IN`.
pub fn serialize_label(sf: SentenceFunction) -> String {
    format!("{}:{}", sf.level1().abbrev(), sf.level2().name())
}

/// Parses a canonical `L1:L2` label. A bare level-2 name is accepted, and
/// aliases match case-insensitively. A level-1 prefix that disagrees with
/// the level-2 parent is rejected.
pub fn parse_label(text: &str) -> Result<SentenceFunction, TaxonomyError> {
    let unknown = || TaxonomyError::UnknownLabel(text.to_string());
    let trimmed = text.trim();
    let (prefix, rest) = match trimmed.split_once(':') {
        Some((p, r)) => (Some(p.trim()), r.trim()),
        None => (None, trimmed),
    };
    let level2 = Level2::ALL
        .into_iter()
        .find(|l2| l2.matches_name(rest))
        .ok_or_else(unknown)?;
    if let Some(p) = prefix {
        let l1: Level1 = p.parse().map_err(|_| unknown())?;
        if l1 != level2.level1() {
            return Err(unknown());
        }
    }
    Ok(SentenceFunction::new(level2))
}

impl fmt::Display for SentenceFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serialize_label(*self))
    }
}

impl FromStr for SentenceFunction {
    type Err = TaxonomyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_label(s)
    }
}

impl Serialize for SentenceFunction {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&serialize_label(*self))
    }
}

impl<'de> Deserialize<'de> for SentenceFunction {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        parse_label(&s).map_err(serde::de::Error::custom)
    }
}

impl Serialize for Level2 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Level2 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        parse_label(&s).map(SentenceFunction::level2).map_err(serde::de::Error::custom)
    }
}

impl Serialize for Level1 {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.abbrev())
    }
}

impl<'de> Deserialize<'de> for Level1 {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Which granularity a target or comparison is made at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Level {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
}

impl Level {
    pub fn class_count(self) -> usize {
        match self {
            Level::One => Level1::COUNT,
            Level::Two => Level2::COUNT,
        }
    }

    /// Class code of `sf` at this level.
    pub fn code_of(self, sf: SentenceFunction) -> usize {
        match self {
            Level::One => sf.level1().code(),
            Level::Two => sf.level2().code(),
        }
    }
}

impl FromStr for Level {
    type Err = TaxonomyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "1" => Ok(Level::One),
            "2" => Ok(Level::Two),
            other => Err(TaxonomyError::UnknownLabel(other.to_string())),
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Level::One => f.write_str("1"),
            Level::Two => f.write_str("2"),
        }
    }
}

/// A sentence function at one granularity: a level-1 group or a full
/// level-2 label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TargetFunction {
    Level1(Level1),
    Level2(SentenceFunction),
}

impl TargetFunction {
    /// `sf` viewed at `level`.
    pub fn at(level: Level, sf: SentenceFunction) -> Self {
        match level {
            Level::One => TargetFunction::Level1(sf.level1()),
            Level::Two => TargetFunction::Level2(sf),
        }
    }

    pub fn from_code(level: Level, code: usize) -> Result<Self, TaxonomyError> {
        Ok(match level {
            Level::One => TargetFunction::Level1(Level1::from_code(code)?),
            Level::Two => TargetFunction::Level2(SentenceFunction::new(Level2::from_code(code)?)),
        })
    }

    pub fn level(self) -> Level {
        match self {
            TargetFunction::Level1(_) => Level::One,
            TargetFunction::Level2(_) => Level::Two,
        }
    }

    pub fn code(self) -> usize {
        match self {
            TargetFunction::Level1(l1) => l1.code(),
            TargetFunction::Level2(sf) => sf.level2().code(),
        }
    }

    pub fn level1(self) -> Level1 {
        match self {
            TargetFunction::Level1(l1) => l1,
            TargetFunction::Level2(sf) => sf.level1(),
        }
    }

    /// Whether `sf` falls under this target.
    pub fn matches(self, sf: SentenceFunction) -> bool {
        self.level().code_of(sf) == self.code()
    }
}

impl fmt::Display for TargetFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TargetFunction::Level1(l1) => f.write_str(l1.abbrev()),
            TargetFunction::Level2(sf) => write!(f, "{sf}"),
        }
    }
}

/// Accepts a level-1 name (`IN`) or any label string `parse_label` accepts.
impl FromStr for TargetFunction {
    type Err = TaxonomyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Ok(l1) = s.parse::<Level1>() {
            return Ok(TargetFunction::Level1(l1));
        }
        parse_label(s).map(TargetFunction::Level2)
    }
}

impl Serialize for TargetFunction {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for TargetFunction {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
