//! The three genera and nine species handled by the classifiers.
//!
//! Class indices follow the fixed listing order below; every probability
//! vector, confusion matrix and report in the crate uses it.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown taxon {0:?}")]
pub struct UnknownTaxon(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Genus {
    Aedes,
    Anopheles,
    Culex,
}

impl Genus {
    pub const ALL: [Genus; 3] = [Genus::Aedes, Genus::Anopheles, Genus::Culex];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Genus::Aedes => "aedes",
            Genus::Anopheles => "anopheles",
            Genus::Culex => "culex",
        }
    }

    /// The three species of this genus, in class order.
    pub fn species(self) -> [Species; 3] {
        let base = self.index() * 3;
        [Species::ALL[base], Species::ALL[base + 1], Species::ALL[base + 2]]
    }
}

impl fmt::Display for Genus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = self.name();
        write!(f, "{}{}", name[..1].to_uppercase(), &name[1..])
    }
}

impl FromStr for Genus {
    type Err = UnknownTaxon;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        Genus::ALL
            .into_iter()
            .find(|g| g.name() == lower)
            .ok_or_else(|| UnknownTaxon(s.to_owned()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Species {
    Aegypti,
    Infirmatus,
    Taeniorhynchus,
    Crucians,
    Quadrimaculatus,
    Stephensi,
    Coronator,
    Nigripalpus,
    Salinarius,
}

impl Species {
    pub const ALL: [Species; 9] = [
        Species::Aegypti,
        Species::Infirmatus,
        Species::Taeniorhynchus,
        Species::Crucians,
        Species::Quadrimaculatus,
        Species::Stephensi,
        Species::Coronator,
        Species::Nigripalpus,
        Species::Salinarius,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn genus(self) -> Genus {
        Genus::ALL[self.index() / 3]
    }

    /// Position within the genus (0..3).
    pub fn index_in_genus(self) -> usize {
        self.index() % 3
    }

    pub fn in_genus(genus: Genus, i: usize) -> Option<Self> {
        (i < 3).then(|| Species::ALL[genus.index() * 3 + i])
    }

    pub fn name(self) -> &'static str {
        match self {
            Species::Aegypti => "aegypti",
            Species::Infirmatus => "infirmatus",
            Species::Taeniorhynchus => "taeniorhynchus",
            Species::Crucians => "crucians",
            Species::Quadrimaculatus => "quadrimaculatus",
            Species::Stephensi => "stephensi",
            Species::Coronator => "coronator",
            Species::Nigripalpus => "nigripalpus",
            Species::Salinarius => "salinarius",
        }
    }

    pub fn names() -> Vec<String> {
        Species::ALL.iter().map(|s| s.name().to_owned()).collect()
    }
}

impl fmt::Display for Species {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.genus(), self.name())
    }
}

impl FromStr for Species {
    type Err = UnknownTaxon;

    /// Accepts `stephensi`, `Anopheles stephensi` or `anopheles_stephensi`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        let epithet = lower.rsplit([' ', '_', '.']).next().unwrap_or("");
        let species = Species::ALL
            .into_iter()
            .find(|sp| sp.name() == epithet)
            .ok_or_else(|| UnknownTaxon(s.to_owned()))?;
        if lower != epithet {
            let genus_part = lower[..lower.len() - epithet.len()].trim_end_matches([' ', '_', '.']);
            let matches_genus = genus_part
                .parse::<Genus>()
                .map(|g| g == species.genus())
                .unwrap_or(genus_part.len() <= 3 && species.genus().name().starts_with(genus_part));
            if !matches_genus {
                return Err(UnknownTaxon(s.to_owned()));
            }
        }
        Ok(species)
    }
}

/// Genus plus species; the species always belongs to the genus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawLabel", into = "RawLabel")]
pub struct TaxonLabel {
    species: Species,
}

impl TaxonLabel {
    pub fn new(species: Species) -> Self {
        Self { species }
    }

    pub fn species(&self) -> Species {
        self.species
    }

    pub fn genus(&self) -> Genus {
        self.species.genus()
    }
}

impl From<Species> for TaxonLabel {
    fn from(species: Species) -> Self {
        Self::new(species)
    }
}

impl fmt::Display for TaxonLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.species.fmt(f)
    }
}

#[derive(Serialize, Deserialize)]
struct RawLabel {
    genus: Genus,
    species: Species,
}

impl TryFrom<RawLabel> for TaxonLabel {
    type Error = String;

    fn try_from(raw: RawLabel) -> Result<Self, Self::Error> {
        if raw.species.genus() != raw.genus {
            return Err(format!("{} does not belong to {}", raw.species.name(), raw.genus));
        }
        Ok(Self::new(raw.species))
    }
}

impl From<TaxonLabel> for RawLabel {
    fn from(l: TaxonLabel) -> Self {
        RawLabel {
            genus: l.genus(),
            species: l.species,
        }
    }
}
