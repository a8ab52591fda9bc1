//! Hard-core configuration spaces with fixed hole number and (optionally)
//! fixed magnetization.
//!
//! Configurations are packed two bits per site into a `u128` word, site `i`
//! occupying bits `2i..2i+2`. The canonical ordering is lexicographic over
//! the word read from site 0 to site `n-1`, with `down < up < hole`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_SITES: usize = 64;
pub const DEFAULT_DIMENSION_CAP: usize = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalState {
    Down = 0,
    Up = 1,
    Hole = 2,
    Ground = 3,
    Lost = 4,
}

impl LocalState {
    pub const PHYSICAL: [LocalState; 3] = [LocalState::Down, LocalState::Up, LocalState::Hole];
    pub const ALL: [LocalState; 5] = [
        LocalState::Down,
        LocalState::Up,
        LocalState::Hole,
        LocalState::Ground,
        LocalState::Lost,
    ];

    pub fn to_char(self) -> char {
        match self {
            LocalState::Down => 'd',
            LocalState::Up => 'u',
            LocalState::Hole => 'h',
            LocalState::Ground => 'g',
            LocalState::Lost => 'L',
        }
    }

    pub fn from_char(c: char) -> Option<Self> {
        Some(match c {
            'd' => LocalState::Down,
            'u' => LocalState::Up,
            'h' => LocalState::Hole,
            'g' => LocalState::Ground,
            'L' => LocalState::Lost,
            _ => return None,
        })
    }

    pub fn index(self) -> usize {
        self as usize
    }

    fn from_code(code: u128) -> Self {
        match code {
            0 => LocalState::Down,
            1 => LocalState::Up,
            _ => LocalState::Hole,
        }
    }

    /// `S^z` eigenvalue; zero for anything that is not a spin.
    pub fn sz(self) -> f64 {
        match self {
            LocalState::Down => -0.5,
            LocalState::Up => 0.5,
            _ => 0.0,
        }
    }

    pub fn is_spin(self) -> bool {
        matches!(self, LocalState::Down | LocalState::Up)
    }

    pub fn is_physical(self) -> bool {
        matches!(self, LocalState::Down | LocalState::Up | LocalState::Hole)
    }
}

/// One local state per site.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Configuration(pub Vec<LocalState>);

impl Configuration {
    pub fn n_sites(&self) -> usize {
        self.0.len()
    }

    pub fn count(&self, s: LocalState) -> usize {
        self.0.iter().filter(|&&x| x == s).count()
    }

    /// Product configuration with every site `Down` except the listed holes and ups.
    pub fn with_defects(n_sites: usize, holes: &[usize], ups: &[usize]) -> Result<Self> {
        let mut states = vec![LocalState::Down; n_sites];
        for (&site, s) in holes
            .iter()
            .map(|h| (h, LocalState::Hole))
            .chain(ups.iter().map(|u| (u, LocalState::Up)))
        {
            if site >= n_sites {
                return Err(Error::SiteOutOfRange { site, n_sites });
            }
            if states[site] != LocalState::Down {
                return Err(Error::Sector(format!("site {site} assigned twice")));
            }
            states[site] = s;
        }
        Ok(Configuration(states))
    }

    pub fn to_word(&self) -> Result<u128> {
        if self.0.len() > MAX_SITES {
            return Err(Error::Sector(format!("at most {MAX_SITES} sites supported")));
        }
        let mut w = 0u128;
        for (i, &s) in self.0.iter().enumerate() {
            if !s.is_physical() {
                return Err(Error::NotInSector(self.to_string()));
            }
            w = set_site(w, i, s);
        }
        Ok(w)
    }

    pub fn from_word(word: u128, n_sites: usize) -> Self {
        Configuration((0..n_sites).map(|i| site_state(word, i)).collect())
    }
}

impl fmt::Display for Configuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.0 {
            write!(f, "{}", s.to_char())?;
        }
        Ok(())
    }
}

impl FromStr for Configuration {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| LocalState::from_char(c).ok_or_else(|| Error::Parse(format!("bad site state '{c}' in \"{s}\""))))
            .collect::<Result<Vec<_>>>()
            .map(Configuration)
    }
}

#[inline]
pub fn site_code(word: u128, site: usize) -> u128 {
    (word >> (2 * site)) & 0b11
}

#[inline]
pub fn site_state(word: u128, site: usize) -> LocalState {
    LocalState::from_code(site_code(word, site))
}

#[inline]
pub fn set_site(word: u128, site: usize, s: LocalState) -> u128 {
    let shift = 2 * site;
    (word & !(0b11u128 << shift)) | ((s as u128 & 0b11) << shift)
}

/// Exchange the local states of two sites.
#[inline]
pub fn swap_sites(word: u128, i: usize, j: usize) -> u128 {
    let (a, b) = (site_code(word, i), site_code(word, j));
    let cleared = word & !(0b11u128 << (2 * i)) & !(0b11u128 << (2 * j));
    cleared | (b << (2 * i)) | (a << (2 * j))
}

pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc = 1u128;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// A conserved-quantity sector. `n_up = None` leaves the magnetization free.
#[derive(Debug, Clone)]
pub struct SectorBasis {
    n_sites: usize,
    n_holes: usize,
    n_up: Option<usize>,
    words: Vec<u128>,
    binom: Vec<Vec<u128>>,
}

impl SectorBasis {
    pub fn new(n_sites: usize, n_holes: usize, n_up: Option<usize>) -> Result<Self> {
        Self::with_cap(n_sites, n_holes, n_up, DEFAULT_DIMENSION_CAP)
    }

    /// Fixed hole number and fixed number of up spins.
    pub fn enumerate_sector(n_sites: usize, n_holes: usize, n_up: usize) -> Result<Self> {
        Self::new(n_sites, n_holes, Some(n_up))
    }

    pub fn with_cap(n_sites: usize, n_holes: usize, n_up: Option<usize>, cap: usize) -> Result<Self> {
        if n_sites == 0 || n_sites > MAX_SITES {
            return Err(Error::Sector(format!("n_sites must be in 1..={MAX_SITES}, got {n_sites}")));
        }
        if n_holes + n_up.unwrap_or(0) > n_sites {
            return Err(Error::Sector(format!(
                "{n_holes} holes and {} ups do not fit on {n_sites} sites",
                n_up.unwrap_or(0)
            )));
        }
        let dim = sector_dimension(n_sites, n_holes, n_up);
        if dim > cap as u128 {
            return Err(Error::Capacity { n_sites, n_holes, n_up, cap });
        }
        let binom = (0..=n_sites)
            .map(|n| (0..=n_sites).map(|k| binomial(n, k)).collect())
            .collect();
        let mut basis = SectorBasis { n_sites, n_holes, n_up, words: Vec::with_capacity(dim as usize), binom };
        let mut words = Vec::with_capacity(dim as usize);
        basis.fill(0, 0u128, n_holes, n_up, &mut words);
        debug_assert_eq!(words.len() as u128, dim);
        basis.words = words;
        Ok(basis)
    }

    fn fill(&self, site: usize, word: u128, holes: usize, ups: Option<usize>, out: &mut Vec<u128>) {
        let rem = self.n_sites - site;
        if rem == 0 {
            out.push(word);
            return;
        }
        for s in LocalState::PHYSICAL {
            let (h, u) = match s {
                LocalState::Hole if holes == 0 => continue,
                LocalState::Hole => (holes - 1, ups),
                LocalState::Up => match ups {
                    Some(0) => continue,
                    Some(u) => (holes, Some(u - 1)),
                    None => (holes, None),
                },
                _ => (holes, ups),
            };
            if self.completions(rem - 1, h, u) > 0 {
                self.fill(site + 1, set_site(word, site, s), h, u, out);
            }
        }
    }

    fn completions(&self, rem: usize, holes: usize, ups: Option<usize>) -> u128 {
        if holes > rem {
            return 0;
        }
        match ups {
            Some(u) => self.binom[rem][holes] * self.binom[rem - holes].get(u).copied().unwrap_or(0),
            None => self.binom[rem][holes] << (rem - holes),
        }
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn n_holes(&self) -> usize {
        self.n_holes
    }

    pub fn n_up(&self) -> Option<usize> {
        self.n_up
    }

    pub fn dim(&self) -> usize {
        self.words.len()
    }

    pub fn words(&self) -> &[u128] {
        &self.words
    }

    pub fn word(&self, m: usize) -> u128 {
        self.words[m]
    }

    pub fn state(&self, m: usize, site: usize) -> LocalState {
        site_state(self.words[m], site)
    }

    pub fn unrank(&self, m: usize) -> Result<Configuration> {
        if m >= self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: m });
        }
        Ok(Configuration::from_word(self.words[m], self.n_sites))
    }

    /// Ordinal of a packed word, or `None` if it lies outside the sector.
    pub fn rank_word(&self, word: u128) -> Option<usize> {
        let mut holes = self.n_holes;
        let mut ups = self.n_up;
        let mut rank = 0u128;
        for site in 0..self.n_sites {
            let rem = self.n_sites - site - 1;
            match site_code(word, site) {
                0 => {}
                1 => {
                    rank += self.completions(rem, holes, ups);
                    ups = match ups {
                        Some(0) => return None,
                        Some(u) => Some(u - 1),
                        None => None,
                    };
                }
                2 => {
                    rank += self.completions(rem, holes, ups);
                    if let Some(u) = ups {
                        if u > 0 {
                            rank += self.completions(rem, holes, Some(u - 1));
                        }
                    } else {
                        rank += self.completions(rem, holes, None);
                    }
                    if holes == 0 {
                        return None;
                    }
                    holes -= 1;
                }
                _ => return None,
            }
        }
        if holes != 0 || ups.is_some_and(|u| u != 0) {
            return None;
        }
        if self.n_sites < MAX_SITES && word >> (2 * self.n_sites) != 0 {
            return None;
        }
        Some(rank as usize)
    }

    pub fn rank(&self, c: &Configuration) -> Result<usize> {
        if c.n_sites() != self.n_sites {
            return Err(Error::DimensionMismatch { expected: self.n_sites, got: c.n_sites() });
        }
        let w = c.to_word()?;
        self.rank_word(w).ok_or_else(|| Error::NotInSector(c.to_string()))
    }

    pub fn contains(&self, c: &Configuration) -> bool {
        self.rank(c).is_ok()
    }
}

/// Sector dimension without enumerating it.
pub fn sector_dimension(n_sites: usize, n_holes: usize, n_up: Option<usize>) -> u128 {
    if n_holes > n_sites {
        return 0;
    }
    let rest = n_sites - n_holes;
    match n_up {
        Some(u) => binomial(n_sites, n_holes) * binomial(rest, u),
        None => binomial(n_sites, n_holes) << rest,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force(n: usize, nh: usize, nu: Option<usize>) -> Vec<Configuration> {
        let mut out = Vec::new();
        let total = 3usize.pow(n as u32);
        for code in 0..total {
            let mut c = Vec::with_capacity(n);
            let mut x = code;
            for _ in 0..n {
                c.push(LocalState::PHYSICAL[x % 3]);
                x /= 3;
            }
            c.reverse();
            let cfg = Configuration(c);
            if cfg.count(LocalState::Hole) == nh && nu.is_none_or(|u| cfg.count(LocalState::Up) == u) {
                out.push(cfg);
            }
        }
        out.sort();
        out
    }

    #[test]
    fn small_dimensions() {
        assert_eq!(SectorBasis::enumerate_sector(3, 1, 1).unwrap().dim(), 6);
        assert_eq!(SectorBasis::enumerate_sector(19, 1, 1).unwrap().dim(), 342);
        assert_eq!(SectorBasis::enumerate_sector(19, 1, 2).unwrap().dim(), 2907);
        assert_eq!(19 * binomial(18, 2), 2907);
    }

    #[test]
    fn ordering_matches_sorted_brute_force() {
        for (n, nh, nu) in [(4, 1, Some(1)), (5, 2, Some(1)), (4, 1, None), (3, 0, None), (5, 0, Some(2))] {
            let basis = SectorBasis::new(n, nh, nu).unwrap();
            let oracle = brute_force(n, nh, nu);
            assert_eq!(basis.dim(), oracle.len());
            for (m, c) in oracle.iter().enumerate() {
                assert_eq!(&basis.unrank(m).unwrap(), c);
                assert_eq!(basis.rank(c).unwrap(), m);
            }
        }
    }

    #[test]
    fn first_and_last() {
        let b = SectorBasis::enumerate_sector(6, 2, 2).unwrap();
        assert_eq!(b.unrank(0).unwrap().to_string(), "dduuhh");
        assert_eq!(b.unrank(b.dim() - 1).unwrap().to_string(), "hhuudd");
        assert_eq!(b.rank(&"hhuudd".parse().unwrap()).unwrap(), b.dim() - 1);
    }

    #[test]
    fn outside_sector_is_rejected() {
        let b = SectorBasis::enumerate_sector(4, 1, 1).unwrap();
        assert!(matches!(b.rank(&"hhud".parse().unwrap()), Err(Error::NotInSector(_))));
        assert!(b.rank(&"dddd".parse().unwrap()).is_err());
        assert!(b.rank(&"hudg".parse().unwrap()).is_err());
        assert!(b.rank(&"hud".parse().unwrap()).is_err());
    }

    #[test]
    fn capacity_error() {
        let err = SectorBasis::new(37, 1, Some(18)).unwrap_err();
        assert!(matches!(err, Error::Capacity { .. }));
        assert!(SectorBasis::with_cap(10, 1, Some(1), 50).is_err());
        assert!(SectorBasis::new(3, 2, Some(2)).is_err());
    }

    #[test]
    fn string_round_trip() {
        let c: Configuration = "duhgL".parse().unwrap();
        assert_eq!(c.to_string(), "duhgL");
        assert!("dux".parse::<Configuration>().is_err());
    }

    #[test]
    fn swap_exchanges_states() {
        let c: Configuration = "duhd".parse().unwrap();
        let w = swap_sites(c.to_word().unwrap(), 1, 2);
        assert_eq!(Configuration::from_word(w, 4).to_string(), "dhud");
    }

    proptest! {
        #[test]
        fn dimension_matches_binomials(n in 1usize..=20, nh_frac in 0.0f64..1.0, nu_frac in 0.0f64..1.0) {
            let nh = ((n as f64) * nh_frac).floor() as usize;
            let nu = (((n - nh) as f64) * nu_frac).floor() as usize;
            let expected = binomial(n, nh) * binomial(n - nh, nu);
            prop_assert_eq!(sector_dimension(n, nh, Some(nu)), expected);
            if expected <= 200_000 {
                let b = SectorBasis::enumerate_sector(n, nh, nu).unwrap();
                prop_assert_eq!(b.dim() as u128, expected);
            }
        }

        #[test]
        fn rank_unrank_round_trip(n in 1usize..=12, nh in 0usize..4, nu in 0usize..6, free in any::<bool>()) {
            prop_assume!(nh + nu <= n);
            let nu = if free { None } else { Some(nu) };
            prop_assume!(sector_dimension(n, nh, nu) <= 100_000);
            let b = SectorBasis::new(n, nh, nu).unwrap();
            for m in 0..b.dim() {
                prop_assert_eq!(b.rank_word(b.word(m)), Some(m));
            }
        }
    }
}
