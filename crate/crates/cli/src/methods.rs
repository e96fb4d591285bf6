//! The experiment's method matrix.

use ddnz_core::score::ConditioningMode;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Nlm,
    Unet,
    DdpmPet,
    DdpmMr,
    DdpmPetmr,
    DdpmMrPetcon,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Nlm,
        Method::Unet,
        Method::DdpmPet,
        Method::DdpmMr,
        Method::DdpmPetmr,
        Method::DdpmMrPetcon,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Method::Nlm => "nlm",
            Method::Unet => "unet",
            Method::DdpmPet => "ddpm_pet",
            Method::DdpmMr => "ddpm_mr",
            Method::DdpmPetmr => "ddpm_petmr",
            Method::DdpmMrPetcon => "ddpm_mr_petcon",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        let norm = s.trim().to_lowercase();
        Method::ALL.into_iter().find(|m| m.label() == norm)
    }

    pub fn is_diffusion(&self) -> bool {
        matches!(self, Method::DdpmPet | Method::DdpmMr | Method::DdpmPetmr | Method::DdpmMrPetcon)
    }

    pub fn conditioning(&self) -> Option<ConditioningMode> {
        match self {
            Method::DdpmPet => Some(ConditioningMode::Pet),
            Method::DdpmMr => Some(ConditioningMode::Mr),
            Method::DdpmPetmr => Some(ConditioningMode::PetMr),
            Method::DdpmMrPetcon => Some(ConditioningMode::MrPetCon),
            _ => None,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_round_trip() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.label()), Some(m));
            assert_eq!(Method::parse(&m.label().to_uppercase()), Some(m));
        }
        assert_eq!(Method::parse("bm3d"), None);
    }
}
