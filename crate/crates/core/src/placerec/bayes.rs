//! Two-state discrete Bayes filter over the loop-closure event of a candidate pair.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BayesBelief {
    pub p_lc: f64,
    /// `p(LC_t | LC_{t−1})`.
    pub stay_lc: f64,
    /// `p(¬LC_t | ¬LC_{t−1})`.
    pub stay_nlc: f64,
    /// `p(verify = + | LC)`.
    pub p_pos_lc: f64,
    /// `p(verify = + | ¬LC)`.
    pub p_pos_nlc: f64,
}

impl Default for BayesBelief {
    fn default() -> Self {
        Self { p_lc: 0.1, stay_lc: 0.9, stay_nlc: 0.9, p_pos_lc: 0.8, p_pos_nlc: 0.1 }
    }
}

impl BayesBelief {
    pub fn with_prior(self, p_lc: f64) -> Self {
        Self { p_lc, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("p_lc", self.p_lc),
            ("stay_lc", self.stay_lc),
            ("stay_nlc", self.stay_nlc),
            ("p_pos_lc", self.p_pos_lc),
            ("p_pos_nlc", self.p_pos_nlc),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidParameter(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }

    /// Transition matrix rows `[LC, ¬LC]`.
    pub fn transition(&self) -> [[f64; 2]; 2] {
        [[self.stay_lc, 1.0 - self.stay_lc], [1.0 - self.stay_nlc, self.stay_nlc]]
    }
}

/// Predict through the Markov chain, then correct with the verification outcome.
pub fn bayes_update(b: &BayesBelief, verified: bool) -> BayesBelief {
    let t = b.transition();
    let pred = b.p_lc * t[0][0] + (1.0 - b.p_lc) * t[1][0];
    let (l_lc, l_nlc) = if verified { (b.p_pos_lc, b.p_pos_nlc) } else { (1.0 - b.p_pos_lc, 1.0 - b.p_pos_nlc) };
    let num = pred * l_lc;
    let den = num + (1.0 - pred) * l_nlc;
    let p_lc = if den > 0.0 { (num / den).clamp(0.0, 1.0) } else { pred };
    BayesBelief { p_lc, ..*b }
}
