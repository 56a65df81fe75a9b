use std::fmt;
use std::str::FromStr;

use crate::error::Error;

/// Architecture and schedule preset.
///
/// `Paper` uses the full published sizes (64×64 sketches refined to
/// 256×256); `Desk` shrinks every width so the whole pipeline trains on a
/// laptop CPU in minutes (16×16 refined to 64×64).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Profile {
    Desk,
    Paper,
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        })
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::config(format!("unknown profile `{other}` (expected desk or paper)"))),
        }
    }
}

/// `log2(size / 4)` when `size = 4·2^k` with `k ≥ 1`.
pub(crate) fn halvings_to_four(size: usize) -> Option<usize> {
    (size >= 8 && size % 4 == 0 && (size / 4).is_power_of_two()).then(|| (size / 4).trailing_zeros() as usize)
}
